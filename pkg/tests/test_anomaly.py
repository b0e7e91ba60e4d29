import numpy as np
import pytest

from inspectlab.anomaly import (AnomalyConfig, AnomalyError, LabelGuardError,
                                evaluate_anomaly_auc, load_model, save_model, score,
                                score_many, train_unsupervised)
from inspectlab.corpus import LabelClass, simulate_interrupted_print


@pytest.fixture(scope="module")
def good_pool(small_corpus, small_images):
    return [small_images[s.id] for s in small_corpus.samples
            if s.label is LabelClass.GOOD]


@pytest.fixture(scope="module")
def trained(good_pool, small_corpus):
    config = AnomalyConfig(image_size=32, epochs=12, seed=21,
                           defect_params=small_corpus.corpus_spec.defect_params)
    return train_unsupervised(good_pool[:50], config)


class TestTraining:
    def test_loss_decreases(self, trained):
        assert trained.epoch_losses[-1] < trained.epoch_losses[0]

    def test_deterministic_weights(self, good_pool, small_corpus):
        config = AnomalyConfig(image_size=32, epochs=2, seed=33,
                               defect_params=small_corpus.corpus_spec.defect_params)
        a = train_unsupervised(good_pool[:50], config)
        b = train_unsupervised(good_pool[:50], config)
        assert a.weights == b.weights
        assert a.epoch_losses == b.epoch_losses

    def test_label_guard(self, good_pool):
        config = AnomalyConfig(image_size=32, epochs=1)
        labels = [LabelClass.GOOD] * 49 + [LabelClass.DOUBLE_PRINT]
        with pytest.raises(LabelGuardError):
            train_unsupervised(good_pool[:50], config, labels=labels)

    def test_too_few_images(self, good_pool):
        with pytest.raises(AnomalyError):
            train_unsupervised(good_pool[:20], AnomalyConfig(image_size=32, epochs=1))


class TestScoring:
    def test_map_shape_and_score_range(self, trained, good_pool):
        result = score(trained, good_pool[51])
        assert result.map.shape == (32, 32)
        assert 0.0 <= result.score <= 1.0

    def test_scoring_deterministic(self, trained, good_pool):
        a = score(trained, good_pool[52])
        b = score(trained, good_pool[52])
        assert a.score == b.score
        assert np.array_equal(a.map, b.map)

    def test_dimension_mismatch(self, trained):
        with pytest.raises(AnomalyError):
            score(trained, np.zeros((16, 16), dtype=np.uint8))

    def test_corrupted_scores_higher(self, trained, good_pool):
        # held-out Good images vs maximal-severity interrupted-print corruption
        held_out = good_pool[50:]
        wins = trials = 0
        i = 0
        while trials < 100:
            img = held_out[i % len(held_out)]
            bands = [[10.0 + (i % 3), 7.0], [20.0 - (i % 2), 7.0]]
            corrupted, _ = simulate_interrupted_print(img, bands)
            if score(trained, corrupted).score > score(trained, img).score:
                wins += 1
            trials += 1
            i += 1
        assert wins >= 90

    def test_score_many_matches_score(self, trained, good_pool):
        batch = good_pool[50:54]
        many = score_many(trained, batch)
        singles = [score(trained, img).score for img in batch]
        assert np.allclose(many, singles)


class TestEvaluateAuc:
    def test_mixed_test_set(self, trained, small_corpus, small_images):
        samples = list(small_corpus.samples)[40:80]  # 20 Good + 20 defective
        images = [small_images[s.id] for s in samples]
        labels = [s.label for s in samples]
        auc = evaluate_anomaly_auc(trained, images, labels)
        assert 0.0 <= auc <= 1.0

    def test_single_class_rejected(self, trained, good_pool):
        with pytest.raises(AnomalyError):
            evaluate_anomaly_auc(trained, good_pool[:5], [LabelClass.GOOD] * 5)

    def test_monotone_transform_invariance(self, trained, small_corpus, small_images):
        from inspectlab.metrics import auc_binary
        samples = list(small_corpus.samples)[45:75]  # mixes Good and defective
        scores = score_many(trained, [small_images[s.id] for s in samples])
        positives = np.array([s.label.is_defective for s in samples])
        assert auc_binary(np.exp(scores), positives) == \
            pytest.approx(auc_binary(scores, positives), abs=1e-12)


class TestPersistence:
    def test_round_trip(self, trained, tmp_path, good_pool):
        path = tmp_path / "m.anom"
        save_model(trained, path)
        assert path.read_bytes()[:5] == b"ANOM1"
        loaded = load_model(path)
        assert loaded.config == trained.config
        assert loaded.epoch_losses == trained.epoch_losses
        img = good_pool[55]
        assert score(loaded, img).score == score(trained, img).score

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"BOGUS" + b"\x00" * 16)
        with pytest.raises(AnomalyError):
            load_model(path)
