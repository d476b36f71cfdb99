"""Selector tests: trunk layout, routing rules, heads, overfit sanity."""

import numpy as np
import pytest

from avlora.asr import AsrModel
from avlora.audio import (
    NoiseCategory,
    NoiseScenario,
    build_noise_bank,
    synth_utterance,
)
from avlora.corpus import synth_corpus
from avlora.lora import AdapterRegistry, init_adapter_set
from avlora.selector import (
    ClassifierTrainConfig,
    NoiseClassifier,
    OracleClassifier,
    RoutingDecision,
    classify,
    classify_batch,
    evaluate_classifier,
    infer_routed,
    load_classifier,
    route,
    save_classifier,
    train_classifier,
)


@pytest.fixture(scope="module")
def clf():
    return NoiseClassifier(seed=8)


@pytest.fixture(scope="module")
def bank():
    return build_noise_bank(n_clips_per_category=30, seed=12)


def registry_with(base, *scenario_ids):
    reg = AdapterRegistry(base)
    for i, sid in enumerate(scenario_ids):
        reg.register(init_adapter_set(base, NoiseScenario.parse(sid), seed=i))
    return reg


def rand_mel(T=96, seed=0):
    return np.random.default_rng(seed).uniform(-1.5, 0.5, (T, 80)).astype(np.float32)


class TestClassifierShape:
    def test_exactly_ten_conv_layers(self, clf):
        assert clf.n_conv_layers == 10
        conv_names = [n for n in clf.named_tensors() if ".conv" in n and n.endswith(".w")]
        assert len(conv_names) == 10

    def test_sixty_four_channels(self, clf):
        for name, t in clf.named_tensors().items():
            if ".conv" in name and name.endswith(".w") and "conv_in" not in name:
                assert t.shape[0] == 64

    def test_softmax_sums_to_one(self, clf):
        probs, snr = classify(clf, rand_mel())
        assert probs.shape == (4,)
        assert abs(probs.sum() - 1.0) < 1e-5
        assert np.isscalar(snr) or isinstance(snr, float)

    def test_deterministic(self, clf):
        mel = rand_mel(seed=3)
        a = classify(clf, mel)
        b = classify(clf, mel)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]

    def test_short_input_rejected(self, clf):
        with pytest.raises(ValueError):
            classify(clf, rand_mel(T=5))

    def test_crop_and_pad(self, clf):
        long = rand_mel(T=300, seed=4)
        short = rand_mel(T=20, seed=5)
        assert clf._prep(long[None]).shape == (1, 96, 80)
        assert clf._prep(short[None]).shape == (1, 96, 80)

    def test_batch_equals_single(self, clf):
        mels = np.stack([clf._prep(rand_mel(seed=i)[None])[0] for i in range(3)])
        probs_b, snr_b = classify_batch(clf, mels)
        for i in range(3):
            probs_1, snr_1 = classify(clf, mels[i])
            np.testing.assert_allclose(probs_b[i], probs_1, atol=1e-6)
            assert abs(snr_b[i] - snr_1) < 1e-5


class TestRouting:
    def test_argmax_picks_music(self):
        base = AsrModel(seed=0)
        reg = registry_with(base, "babble", "music", "natural", "sidespeaker")
        d = route("category", np.array([0.1, 0.7, 0.1, 0.1]), None, reg)
        assert d.chosen_set == "music"
        assert d.predicted_category == NoiseCategory.MUSIC

    def test_threshold_rule_and_boundary(self):
        base = AsrModel(seed=0)
        reg = registry_with(base, "high", "low")
        assert route("level", None, 7.2, reg).chosen_set == "low"
        assert route("level", None, 3.0, reg).chosen_set == "high"
        assert route("level", None, 5.0, reg).chosen_set == "low"

    def test_exact_tie_breaks_to_babble(self):
        base = AsrModel(seed=0)
        reg = registry_with(base, "babble", "music", "natural", "sidespeaker")
        d = route("category", np.array([0.25, 0.25, 0.25, 0.25]), None, reg)
        assert d.chosen_set == "babble"

    def test_missing_set_is_error(self):
        base = AsrModel(seed=0)
        reg = registry_with(base, "high")
        with pytest.raises(KeyError):
            route("level", None, 10.0, reg)

    def test_argmax_invariant_to_monotone_transform(self, clf):
        mel = rand_mel(seed=9)
        probs, _ = classify(clf, mel)
        for temp in (0.25, 1.0, 4.0):
            scaled = np.exp(np.log(probs + 1e-12) / temp)
            scaled /= scaled.sum()
            assert int(np.argmax(scaled)) == int(np.argmax(probs))

    def test_threshold_is_step_function(self):
        base = AsrModel(seed=0)
        reg = registry_with(base, "high", "low")
        for snr in (5.01, 6.0, 29.0):
            assert route("level", None, snr, reg).chosen_set == "low"
        for snr in (4.99, 0.0, -14.0):
            assert route("level", None, snr, reg).chosen_set == "high"

    def test_decision_invariant_enforced(self):
        with pytest.raises(ValueError):
            RoutingDecision("level", None, 3.0, "low")


class TestTraining:
    def test_category_overfit_one_fixed_batch(self, bank):
        # memorization sanity: 32 fixed samples, 300 steps, 100% train acc
        from avlora.selector import build_classifier_dataset
        samples = synth_corpus(8, seed=41, id_prefix="ov")
        ds = build_classifier_dataset(samples, bank, n_draws=32, seed=99,
                                      clean_prob=0.0)
        cfg = ClassifierTrainConfig(steps=300, batch_size=32, lr=1e-3,
                                    seed=3)
        clf, _ = train_classifier("category", ds, cfg)
        probs, _ = classify_batch(clf, ds.mels)
        acc = float(np.mean(probs.argmax(axis=1) == ds.categories))
        assert acc == 1.0

    def test_snr_head_converges_to_constant_label(self, bank):
        # constant-label data: every draw relabeled 12 dB, MSE minimizer
        from avlora.selector import build_classifier_dataset
        samples = synth_corpus(4, seed=42, id_prefix="cv")
        ds = build_classifier_dataset(samples, bank, n_draws=48, seed=7,
                                      clean_prob=0.0)
        ds.snrs_db[:] = 12.0
        cfg = ClassifierTrainConfig(steps=200, batch_size=48, lr=1e-3, seed=1)
        clf, _ = train_classifier("snr", ds, cfg)
        _, est = classify_batch(clf, ds.mels)
        assert np.abs(est - 12.0).mean() <= 0.5

    def test_determinism(self, bank):
        from avlora.selector import build_classifier_dataset
        samples = synth_corpus(6, seed=43, id_prefix="dt")
        ds = build_classifier_dataset(samples, bank, n_draws=16, seed=2)
        cfg = ClassifierTrainConfig(steps=10, batch_size=4, seed=5)
        c1, m1 = train_classifier("category", ds, cfg)
        c2, m2 = train_classifier("category", ds, cfg)
        assert m1["history"] == m2["history"]
        for a, b in zip(c1.params, c2.params):
            np.testing.assert_array_equal(a.data, b.data)

    def test_dataset_determinism(self, bank):
        from avlora.selector import build_classifier_dataset
        samples = synth_corpus(6, seed=46, id_prefix="dd")
        a = build_classifier_dataset(samples, bank, n_draws=12, seed=3)
        b = build_classifier_dataset(samples, bank, n_draws=12, seed=3)
        np.testing.assert_array_equal(a.mels, b.mels)
        np.testing.assert_array_equal(a.snrs_db, b.snrs_db)

    def test_bad_head_rejected(self, bank):
        from avlora.selector import ClassifierDataset
        empty = ClassifierDataset(np.zeros((64, 96, 80), np.float32),
                                  np.zeros(64, np.int64),
                                  np.zeros(64, np.float32))
        with pytest.raises(ValueError):
            train_classifier("pitch", empty)

    def test_eval_reports_per_category_breakout(self, clf, bank):
        samples = synth_corpus(6, seed=44, id_prefix="ev")
        m = evaluate_classifier(clf, "snr", samples, bank, seed=1)
        assert set(m["per_category_decision_accuracy"]) == {
            "babble", "music", "natural", "sidespeaker"}

    def test_classifier_training_never_touches_other_roles(self, bank):
        from avlora.checkpoint import hash_tensors
        from avlora.selector import build_classifier_dataset
        base = AsrModel(seed=0)
        adapter = init_adapter_set(base, NoiseScenario.parse("full"), seed=0)
        before_base = hash_tensors(base.named_tensors())
        before_set = hash_tensors(adapter.named_tensors())
        samples = synth_corpus(4, seed=45, id_prefix="rh")
        ds = build_classifier_dataset(samples, bank, n_draws=8, seed=4)
        train_classifier("snr", ds, ClassifierTrainConfig(steps=5, batch_size=4))
        assert hash_tensors(base.named_tensors()) == before_base
        assert hash_tensors(adapter.named_tensors()) == before_set


class TestRoutedInference:
    def test_oracle_routing_matches_specialist(self, bank):
        base = AsrModel(seed=0)
        reg = registry_with(base, "babble", "music", "natural", "sidespeaker")
        w = synth_utterance("go fox")
        from avlora.video import synth_video
        video = synth_video("go fox", len(w), seed=0)
        oracle = OracleClassifier(category=NoiseCategory.NATURAL)
        d = oracle.decide("category", reg)
        reg.swap(d.chosen_set)
        with reg.read_session() as adapted:
            via_registry = adapted.transcribe(w, video)
        from avlora.lora import inject
        direct = inject(base, reg.get("natural")).transcribe(w, video)
        assert via_registry == direct

    def test_infer_routed_end_to_end_deterministic(self, clf, bank):
        base = AsrModel(seed=0)
        reg = registry_with(base, "high", "low")
        w = synth_utterance("be it")
        from avlora.video import synth_video
        video = synth_video("be it", len(w), seed=1)
        r1 = infer_routed(reg, clf, w, video, mode="level")
        r2 = infer_routed(reg, clf, w, video, mode="level")
        assert r1.transcript == r2.transcript
        assert r1.decision == r2.decision

    def test_decision_jsonl(self, clf, bank, tmp_path):
        import json
        base = AsrModel(seed=0)
        reg = registry_with(base, "babble", "music", "natural", "sidespeaker")
        w = synth_utterance("me")
        from avlora.video import synth_video
        res = infer_routed(reg, clf, w, synth_video("me", len(w), seed=2),
                           mode="category")
        from avlora.selector import decisions_to_jsonl
        decisions_to_jsonl([("utt-1", res)], tmp_path / "route.jsonl")
        rec = json.loads((tmp_path / "route.jsonl").read_text().splitlines()[0])
        assert set(rec) == {"id", "mode", "category_probs", "snr_est", "chosen_set"}
        assert len(rec["category_probs"]) == 4


class TestPersistence:
    def test_roundtrip(self, clf, tmp_path):
        save_classifier(clf, tmp_path / "clf")
        loaded = load_classifier(tmp_path / "clf")
        mel = rand_mel(seed=11)
        a = classify(clf, mel)
        b = classify(loaded, mel)
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]
        assert all(p.role == "classifier" for p in loaded.params)
