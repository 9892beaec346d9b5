import json

import numpy as np
import pytest
from scipy import ndimage

from d3det.synthbench import (BenchmarkSpec, GeneratorSpec, Manifest, ManifestError, build_manifest,
                              default_benchmark, dumps_manifest, fingerprint_residual, load_manifest,
                              loads_manifest, materialize, pink_noise, render, save_manifest,
                              synth_fake, synth_fake_float, synth_real, synth_real_float, universal_pattern)
from d3det.imagekit import read_image


def small_bench(n=10, **kw):
    gens = tuple(GeneratorSpec(f"g{i}", "gan_like" if i % 2 else "diffusion_like", 100 + i) for i in range(4))
    return BenchmarkSpec(gens, ("g0", "g1"), samples_per_generator_per_class=n, image_size=28, **kw)


def test_real_is_deterministic_and_seed_dependent():
    a, b, c = synth_real(5, 56), synth_real(5, 56), synth_real(6, 56)
    assert np.array_equal(a, b)
    assert np.abs(a.astype(int) - c.astype(int)).mean(axis=(0, 1)).min() > 0


def test_pink_noise_spectrum_slope():
    field = pink_noise(np.random.default_rng(0), 128, count=8)
    power = (np.abs(np.fft.rfft2(field)) ** 2).mean(0)
    f = np.hypot(np.fft.rfftfreq(128)[None, :], np.fft.fftfreq(128)[:, None])
    bins = np.logspace(np.log10(2 / 128), np.log10(0.5), 15)
    idx = np.digitize(f, bins)
    xs, ys = [], []
    for k in range(1, len(bins)):
        m = idx == k
        if m.any():
            xs.append(np.log(f[m].mean()))
            ys.append(np.log(power[m].mean()))
    slope = np.polyfit(xs, ys, 1)[0]
    assert abs(slope - (-1.0)) <= 0.5


def test_zero_amplitudes_give_real_image():
    g = GeneratorSpec("g", "gan_like", 3, specific_amplitude=0.0, universal_amplitude=0.0)
    assert np.array_equal(synth_fake(9, g, 1, 56), synth_real(9, 56))


def test_specific_residual_scales_linearly():
    base = synth_real_float(4, 56)
    for fam in ("gan_like", "diffusion_like"):
        amps = np.array([1.0, 2.0, 4.0])
        diffs = [np.abs(synth_fake_float(4, GeneratorSpec("g", fam, 8, specific_amplitude=a,
                                                           universal_amplitude=0.0), 1, 56) - base).mean()
                 for a in amps]
        slope, intercept = np.polyfit(amps, diffs, 1)
        assert abs(intercept) < 1e-9 and np.allclose(diffs, slope * amps, rtol=1e-9)


def test_universal_component_shared():
    g1 = GeneratorSpec("a", "gan_like", 1, specific_amplitude=0.0)
    g2 = GeneratorSpec("b", "diffusion_like", 2, specific_amplitude=0.0)
    assert np.array_equal(fingerprint_residual(g1, 77, 56), fingerprint_residual(g2, 77, 56))
    assert np.allclose(fingerprint_residual(g1, 77, 56), 4.0 * universal_pattern(77, 56))


def _hp_energy(img):
    x = img.astype(np.float64)
    return np.mean((x - ndimage.uniform_filter(x, size=(3, 3, 1), mode="nearest")) ** 2)


@pytest.mark.parametrize("family", ["gan_like", "diffusion_like"])
def test_planted_signal_is_separable_by_highpass_energy(family):
    n = 40
    g = GeneratorSpec("g", family, 123, specific_amplitude=8.0, universal_amplitude=0.0)
    real = [_hp_energy(synth_real(s, 224)) for s in range(n)]
    fake = [_hp_energy(synth_fake(10_000 + s, g, 5, 224)) for s in range(n)]
    v = np.array(real + fake)
    y = np.array([0] * n + [1] * n)
    best = max(max(((v > t) == y).mean(), ((v <= t) == y).mean()) for t in np.concatenate([v, [-1.0]]))
    assert best > 0.9


def test_manifest_counts_and_splits():
    spec = default_benchmark(samples_per_generator_per_class=100)
    m = build_manifest(spec)
    assert len(m.records) == 20 * 2 * 100
    with_train = {r.generator_id for r in m.records if r.split == "train"}
    assert with_train == set(spec.train_subset) and len(with_train) == 8
    fam = [spec.generator(g).family for g in spec.train_subset]
    assert fam.count("gan_like") == 2 and fam.count("diffusion_like") == 6
    ood = [g.generator_id for g in spec.generators if g.generator_id not in with_train]
    for g in ood:
        for label in ("real", "fake"):
            recs = m.select(generators=[g], label=label)
            assert sum(r.split == "val" for r in recs) == 10
            assert sum(r.split == "test" for r in recs) == 90
    for g in spec.train_subset:
        assert len(m.select("train", [g], "real")) == len(m.select("train", [g], "fake"))


def test_manifest_deterministic_bytes():
    a = dumps_manifest(build_manifest(default_benchmark(10, master_seed=3)))
    b = dumps_manifest(build_manifest(default_benchmark(10, master_seed=3)))
    c = dumps_manifest(build_manifest(default_benchmark(10, master_seed=4)))
    assert a == b and a != c


def test_manifest_roundtrip(tmp_path):
    m = build_manifest(small_bench())
    save_manifest(m, tmp_path / "m.jsonl")
    back = load_manifest(tmp_path / "m.jsonl")
    assert back.benchmark == m.benchmark and back.records == m.records


def test_truncated_manifest_names_line():
    text = dumps_manifest(build_manifest(small_bench()))
    lines = text.splitlines()
    broken = "\n".join(lines[:5] + [lines[5][: len(lines[5]) // 2]])
    with pytest.raises(ManifestError, match="line 6"):
        loads_manifest(broken)


def test_line_aligned_truncation_is_caught():
    lines = dumps_manifest(build_manifest(small_bench())).splitlines()
    with pytest.raises(ManifestError):
        loads_manifest("\n".join(lines[:-3]))


def test_unknown_schema_version():
    lines = dumps_manifest(build_manifest(small_bench())).splitlines()
    header = json.loads(lines[0])
    header["schema_version"] = 99
    with pytest.raises(ManifestError, match="schema_version"):
        loads_manifest("\n".join([json.dumps(header)] + lines[1:]))


def test_referential_integrity():
    lines = dumps_manifest(build_manifest(small_bench())).splitlines()
    rec = json.loads(lines[1])
    rec["generator_id"] = "nope"
    with pytest.raises(ManifestError):
        loads_manifest("\n".join([lines[0], json.dumps(rec)] + lines[2:]))


def test_spec_validation():
    g = GeneratorSpec("a", "gan_like", 1)
    with pytest.raises(ManifestError):
        BenchmarkSpec((g, g), ("a",))
    with pytest.raises(ManifestError):
        BenchmarkSpec((g, GeneratorSpec("b", "gan_like", 2)), ("a", "b"))
    with pytest.raises(ManifestError):
        GeneratorSpec("x", "vae_like", 1)
    with pytest.raises(ManifestError):
        GeneratorSpec("x", "gan_like", 1, specific_amplitude=-1.0)


def test_ood_generators_have_no_train_records():
    m = build_manifest(small_bench())
    bad = Manifest(m.benchmark, [r if r.generator_id != "g3" else
                                 type(r)(r.sample_id, r.generator_id, r.label, "train", r.architecture_group,
                                         r.sample_seed) for r in m.records])
    with pytest.raises(ManifestError):
        bad.validate()


def test_render_and_materialize_agree(tmp_path):
    m = build_manifest(small_bench(n=2))
    paths = materialize(m, tmp_path)
    assert len(paths) == len(m.records)
    for r, p in zip(m.records, paths):
        assert np.array_equal(read_image(p), render(r, m.benchmark))


def test_same_group_merging_is_expressible():
    gens = (GeneratorSpec("sd14", "diffusion_like", 1, architecture_group="sd"),
            GeneratorSpec("sd15", "diffusion_like", 2, architecture_group="sd"),
            GeneratorSpec("gan", "gan_like", 3))
    m = build_manifest(BenchmarkSpec(gens, ("gan",), samples_per_generator_per_class=4, image_size=28))
    assert {r.architecture_group for r in m.records} == {"sd", "gan"}
