import numpy as np
import pytest

from d3det.d3head import HeadError, TokenSet, TrainConfig, predict_batch, train
from d3det.d3head import checkpoint as ckpt


def separable(n, rng, n_tokens=2, dim=2):
    y = np.arange(n) % 2
    x = rng.standard_normal((n, n_tokens, dim)) * 0.3
    x[:, :, 0] += np.where(y == 1, 2.0, -2.0)[:, None]
    gens = np.where(np.arange(n) % 4 < 2, "g0", "g1")
    return TokenSet(x, y, gens, gens, ["ID"] * n)


@pytest.mark.parametrize("kind", ["fc_only", "self_attention"])
def test_separable_reaches_full_val_accuracy(kind, rng):
    data, val = separable(64, rng), separable(32, rng)
    _, log = train(kind, data, TrainConfig(learning_rate=5e-2, batch_size=16, epochs=5), val)
    assert max(e["val_mean_acc"] for e in log.epochs) == 1.0


def test_training_is_deterministic(rng):
    data, val = separable(40, rng), separable(20, rng)
    cfg = TrainConfig(learning_rate=1e-2, batch_size=8, epochs=3, seed=4)
    a, la = train("self_attention", data, cfg, val)
    b, lb = train("self_attention", data, cfg, val)
    assert ckpt.dumps(a) == ckpt.dumps(b) and la.to_dict() == lb.to_dict()
    c, _ = train("self_attention", data, TrainConfig(learning_rate=1e-2, batch_size=8, epochs=3, seed=5), val)
    assert ckpt.dumps(a) != ckpt.dumps(c)


def test_errors(rng):
    data = separable(8, rng)
    with pytest.raises(HeadError):
        train("fc_only", data.subset(np.array([], dtype=int)), TrainConfig())
    with pytest.raises(HeadError):
        train("fc_only", data.subset(np.flatnonzero(data.labels == 1)), TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 1.0})


def test_best_checkpoint_is_returned(rng):
    data, val = separable(40, rng), separable(20, rng)
    snaps = {}
    cfg = TrainConfig(learning_rate=3e-2, batch_size=8, epochs=6)
    best, log = train("fc_only", data, cfg, val,
                      on_epoch=lambda e, p: snaps.__setitem__(e, p.copy().as_float32_precision()))
    keys = [(e["val_mean_acc"], -e["val_loss"]) for e in log.epochs]
    assert log.best_epoch == keys.index(max(keys))
    for k in best.weights:
        assert np.array_equal(best.weights[k], snaps[log.best_epoch].weights[k])


def test_without_val_keeps_last_epoch(rng):
    data = separable(16, rng)
    _, log = train("fc_only", data, TrainConfig(epochs=3, batch_size=4))
    assert log.best_epoch == 2 and log.steps == 12 and log.train_generators == ["g0", "g1"]


def test_per_epoch_tokens_cycle(rng):
    data = separable(16, rng)
    stacked = TokenSet(np.stack([data.tokens, -data.tokens]), data.labels, data.generator_ids, data.groups,
                       data.domains)
    assert stacked.per_epoch and np.array_equal(stacked.for_epoch(3), -data.tokens)
    assert np.array_equal(stacked.eval_tokens(), data.tokens)
    sub = stacked.subset(np.array([0, 5]))
    assert sub.tokens.shape == (2, 2, 2, 2) and sub.labels.tolist() == [0, 1]


def test_single_branch_probe_uses_one_token(rng):
    data = separable(24, rng)
    params, _ = train("fc_only", data.select_tokens([0]), TrainConfig(learning_rate=5e-2, epochs=3, batch_size=8))
    assert params.n_tokens == 1
    assert predict_batch(params, data.tokens[:, :1]).shape == (24,)
