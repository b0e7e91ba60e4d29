import dataclasses
import json

import numpy as np
import pytest

from inspectlab.corpus import (CorpusError, CorpusSpec, DefectParams, ImageSample,
                               LabelClass, Manifest, Provenance, draw_corruption,
                               generate_corpus, load_manifest, render_sample,
                               simulate_double_print, subsample_defective)

_SAMPLE = ImageSample(id="x", path="x.png", label=LabelClass.GOOD,
                      provenance=Provenance.REAL, gen_params={})


def tiny_spec(seed=7, size=24, counts=None, **kwargs):
    counts = counts or {LabelClass.GOOD: 6, LabelClass.DOUBLE_PRINT: 3,
                        LabelClass.INTERRUPTED_PRINT: 3}
    return CorpusSpec(counts=counts, image_size=size, seed=seed, **kwargs)


class TestGenerateCorpus:
    def test_count_conservation(self, tmp_path):
        spec = CorpusSpec(
            counts={LabelClass.GOOD: 100, LabelClass.DOUBLE_PRINT: 20,
                    LabelClass.INTERRUPTED_PRINT: 20},
            image_size=24, seed=3)
        manifest = generate_corpus(spec, tmp_path / "c")
        assert len(manifest.samples) == 140
        counts = manifest.class_counts()
        assert counts[LabelClass.GOOD] == 100
        assert counts[LabelClass.DOUBLE_PRINT] == 20
        assert counts[LabelClass.INTERRUPTED_PRINT] == 20

    def test_determinism_byte_identical(self, tmp_path):
        spec = tiny_spec()
        m1 = generate_corpus(spec, tmp_path / "a")
        m2 = generate_corpus(spec, tmp_path / "b")
        assert (tmp_path / "a" / "manifest.json").read_text() == \
            (tmp_path / "b" / "manifest.json").read_text()
        for s1, s2 in zip(m1.samples, m2.samples):
            assert m1.image_path(s1).read_bytes() == m2.image_path(s2).read_bytes()

    def test_degenerate_double_print_collapses(self, tmp_path):
        params = DefectParams(double_print_offset=(0.0, 0.0), double_print_opacity=(1.0, 1.0))
        spec = tiny_spec(defect_params=params)
        manifest = generate_corpus(spec, tmp_path / "c")
        for s in manifest.samples:
            if s.label is not LabelClass.DOUBLE_PRINT:
                continue
            dp_img = manifest.load_image(s)
            good_params = {k: v for k, v in s.gen_params.items()
                           if k not in ("offset_dx", "offset_dy", "opacity")}
            base = render_sample(spec, LabelClass.GOOD, good_params)
            assert np.array_equal(dp_img, base)

    def test_rerender_from_gen_params(self, small_corpus):
        for s in small_corpus.samples[::17]:
            img = small_corpus.load_image(s)
            again = render_sample(small_corpus.corpus_spec, s.label, s.gen_params)
            assert np.array_equal(img, again)

    def test_distinct_seeds_differ(self, tmp_path):
        for pair in range(10):
            a = generate_corpus(tiny_spec(seed=1000 + pair, size=16,
                                          counts={LabelClass.GOOD: 1}), tmp_path / f"a{pair}")
            b = generate_corpus(tiny_spec(seed=2000 + pair, size=16,
                                          counts={LabelClass.GOOD: 1}), tmp_path / f"b{pair}")
            assert not np.array_equal(a.load_image(a.samples[0]), b.load_image(b.samples[0]))

    def test_all_real_provenance_and_unique_ids(self, small_corpus):
        ids = [s.id for s in small_corpus.samples]
        assert len(set(ids)) == len(ids)
        assert all(s.provenance is Provenance.REAL for s in small_corpus.samples)

    def test_invalid_spec_rejected(self, tmp_path):
        with pytest.raises(CorpusError):
            tiny_spec(size=4).validate()
        with pytest.raises(CorpusError):
            CorpusSpec(counts={LabelClass.GOOD: -1}, seed=0).validate()
        with pytest.raises(CorpusError):
            tiny_spec(defect_params=DefectParams(double_print_opacity=(0.9, 0.5))).validate()
        with pytest.raises(CorpusError):
            tiny_spec(defect_params=DefectParams(double_print_opacity=(0.5, 1.5))).validate()


class TestManifestIO:
    def test_round_trip(self, small_corpus):
        loaded = load_manifest(small_corpus.root / "manifest.json")
        assert loaded.corpus_spec == small_corpus.corpus_spec
        assert loaded.samples == small_corpus.samples

    def test_missing_image_names_sample(self, tmp_path):
        manifest = generate_corpus(tiny_spec(), tmp_path / "c")
        victim = manifest.samples[4]
        manifest.image_path(victim).unlink()
        with pytest.raises(CorpusError, match=victim.id):
            load_manifest(tmp_path / "c" / "manifest.json")

    def test_unknown_format_version(self, tmp_path):
        generate_corpus(tiny_spec(), tmp_path / "c")
        path = tmp_path / "c" / "manifest.json"
        doc = json.loads(path.read_text())
        doc["format_version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(CorpusError, match="format_version"):
            load_manifest(path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CorpusError):
            load_manifest(tmp_path / "nope.json")


class TestSubsampleDefective:
    def _fake(self, n_good, n_dp, n_ip):
        samples = []
        for label, n in [(LabelClass.GOOD, n_good), (LabelClass.DOUBLE_PRINT, n_dp),
                         (LabelClass.INTERRUPTED_PRINT, n_ip)]:
            for i in range(n):
                samples.append(dataclasses.replace(
                    _SAMPLE, id=f"{label.value}-{i:05d}", label=label))
        return Manifest(corpus_spec=tiny_spec(), samples=tuple(samples), root=None)

    def test_ceiling_keep(self):
        m = self._fake(10, 1000, 8)
        out = subsample_defective(m, 0.25, seed=1)
        counts = out.class_counts()
        assert counts[LabelClass.DOUBLE_PRINT] == 250
        assert counts[LabelClass.INTERRUPTED_PRINT] == 2  # ceil(0.25 * 8)
        assert counts[LabelClass.GOOD] == 10

    def test_retention_one_identity(self, small_corpus):
        out = subsample_defective(small_corpus, 1.0, seed=5)
        assert out.samples == small_corpus.samples

    def test_good_untouched_subset_ordered(self, small_corpus):
        out = subsample_defective(small_corpus, 0.5, seed=9)
        assert out.class_counts()[LabelClass.GOOD] == \
            small_corpus.class_counts()[LabelClass.GOOD]
        kept_ids = [s.id for s in out.samples]
        orig_ids = [s.id for s in small_corpus.samples]
        assert set(kept_ids) <= set(orig_ids)
        # relative order preserved
        assert kept_ids == [i for i in orig_ids if i in set(kept_ids)]

    def test_never_empties_a_class(self):
        m = self._fake(5, 2, 2)
        out = subsample_defective(m, 0.25, seed=0)
        assert out.class_counts()[LabelClass.DOUBLE_PRINT] == 1

    def test_deterministic(self, small_corpus):
        a = subsample_defective(small_corpus, 0.5, seed=4)
        b = subsample_defective(small_corpus, 0.5, seed=4)
        assert a.samples == b.samples

    @pytest.mark.parametrize("retention", [0.0, -0.5, 1.01])
    def test_invalid_retention(self, small_corpus, retention):
        with pytest.raises(CorpusError):
            subsample_defective(small_corpus, retention, seed=0)


class TestCorruption:
    def test_double_print_corruption_changes_pixels(self, small_corpus, small_images):
        good = next(s for s in small_corpus.samples if s.label is LabelClass.GOOD)
        img = small_images[good.id]
        corrupted, mask = simulate_double_print(img, 4.0, 0.0, 0.8)
        assert corrupted.shape == img.shape and corrupted.dtype == np.uint8
        assert mask.shape == img.shape
        assert mask.max() > 0.1
        assert not np.array_equal(corrupted, img)

    def test_draw_corruption_mask_marks_changes(self, small_corpus, small_images):
        good = [s for s in small_corpus.samples if s.label is LabelClass.GOOD][1]
        img = small_images[good.id]
        rng = np.random.default_rng(0)
        for _ in range(5):
            corrupted, mask = draw_corruption(img, small_corpus.corpus_spec.defect_params, rng)
            assert corrupted.shape == img.shape
            assert mask.shape == img.shape
            assert 0.0 <= mask.min() and mask.max() <= 1.0

