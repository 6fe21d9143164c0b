import numpy as np
import pytest

from bertplm import trainer as tr
from bertplm.config import parse_config
from bertplm.corpus import (LabeledUtterance, PhonemePosteriorSequence,
                            default_grammar, generate_corpus)
from bertplm.encoder import init_params
from bertplm.rng import stream

SMALL = {"profile": "tiny", "layers": "1", "d": "16", "d_ff": "24",
         "heads": "2", "dropout": "0.0", "max_seq_len": "64"}


def small_config(**extra):
    overrides = dict(SMALL)
    overrides.update({k: str(v) for k, v in extra.items()})
    return parse_config(None, overrides)


def one_hot_utterance(phoneme, label, vocab_size=4, t_len=3, utt_id="u"):
    frames = np.zeros((t_len, vocab_size))
    frames[:, phoneme] = 1.0
    return LabeledUtterance(
        PhonemePosteriorSequence(frames, utterance_id=utt_id), label)


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        params = {"w": np.ones((2, 2))}
        state = tr.OptimState.for_params(params, lr=0.1)
        tr.adam_step(params, {"w": np.zeros((2, 2))}, state)
        np.testing.assert_array_equal(params["w"], np.ones((2, 2)))
        assert state.step == 1

    def test_constant_gradient_update_magnitude_approaches_lr(self):
        # with constant g, bias-corrected updates tend to lr * sign(g)
        params = {"w": np.zeros(3)}
        state = tr.OptimState.for_params(params, lr=0.01)
        grad = np.array([0.5, -2.0, 7.0])
        previous = params["w"].copy()
        for _ in range(500):
            previous = params["w"].copy()
            tr.adam_step(params, {"w": grad.copy()}, state)
        step_size = np.abs(params["w"] - previous)
        np.testing.assert_allclose(step_size, 0.01, rtol=1e-3)

    def test_quadratic_bowl_norm_decreases(self):
        rng = stream(1, "bowl")
        params = {"p": rng.normal(size=8)}
        state = tr.OptimState.for_params(params, lr=1e-2)
        norms = []
        for _ in range(500):
            tr.adam_step(params, {"p": 2.0 * params["p"]}, state)
            norms.append(float(np.linalg.norm(params["p"])))
        warm = norms[50:]
        assert all(b < a + 1e-12 for a, b in zip(warm, warm[1:]))
        assert norms[-1] < 0.1 * norms[0]

    def test_nan_gradient_aborts_with_name(self):
        params = {"good": np.ones(2), "bad": np.ones(2)}
        state = tr.OptimState.for_params(params, lr=0.1)
        grads = {"good": np.ones(2), "bad": np.array([1.0, np.nan])}
        with pytest.raises(tr.TrainingError, match="bad"):
            tr.adam_step(params, grads, state)


class TestCheckpoint:
    def test_round_trip_bitwise_at_f32(self, tmp_path):
        cfg = small_config()
        rng = stream(2, "ck")
        params = {"embed": rng.normal(size=(4, 16)), "mask_vec": rng.normal(size=16)}
        optim = tr.OptimState.for_params(params, lr=cfg.lr)
        optim.m["embed"] += 0.5
        optim.step = 7
        path = tmp_path / "m.ckpt"
        tr.save_checkpoint(path, params, cfg, step=7, optim=optim)
        loaded = tr.load_checkpoint(path)
        assert loaded.step == 7
        assert loaded.config == cfg
        for name, arr in params.items():
            assert loaded.arrays[name].astype("<f4").tobytes() == \
                arr.astype("<f4").tobytes()
        assert loaded.optim is not None
        np.testing.assert_array_equal(
            loaded.optim.m["embed"], optim.m["embed"].astype("<f4"))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(tr.DataError):
            tr.load_checkpoint(path)


class TestMetrics:
    def test_all_correct(self):
        confusion = np.diag([3, 4, 2])
        metrics = tr.metrics_from_confusion(confusion)
        assert metrics.error_rate == 0.0
        assert metrics.macro_f1 == 1.0
        assert metrics.micro_f1 == 1.0

    def test_hand_computed_degenerate_predictor(self):
        # 2 balanced classes, everything predicted class 0:
        # micro = accuracy = 0.5; class0 F1 = 2/3, class1 F1 = 0
        confusion = np.array([[5, 0], [5, 0]])
        metrics = tr.metrics_from_confusion(confusion)
        assert abs(metrics.micro_f1 - 0.5) <= 1e-12
        assert abs(metrics.macro_f1 - (2 / 3 + 0) / 2) <= 1e-12

    def test_zero_support_class_flagged(self):
        confusion = np.array([[3, 0, 1], [0, 2, 0], [0, 0, 0]])
        metrics = tr.metrics_from_confusion(confusion)
        assert metrics.zero_support_classes == (2,)

    def test_empty_set_is_an_error(self):
        with pytest.raises(tr.DataError):
            tr.metrics_from_confusion(np.zeros((2, 2), dtype=np.int64))

    def test_micro_f1_is_one_minus_error(self):
        rng = stream(3, "conf")
        for _ in range(20):
            confusion = rng.integers(0, 9, size=(4, 4))
            confusion[0, 0] += 1  # non-empty
            metrics = tr.metrics_from_confusion(confusion)
            assert abs(metrics.micro_f1 - (1.0 - metrics.error_rate)) <= 1e-12


class TestPretrain:
    def test_single_utterance_single_step(self):
        grammar = default_grammar()
        corpus = [u.sequence for u in generate_corpus(grammar, 1, seed=4)]
        cfg = small_config(epochs=1, batch_size=1)
        ckpt = tr.pretrain(corpus, cfg, seed=4,
                           sil_index=grammar.vocab.sil_index)
        assert ckpt.step == 1
        assert all(np.all(np.isfinite(a)) for a in ckpt.arrays.values())

    def test_same_seed_gives_bitwise_identical_checkpoints(self, tmp_path):
        grammar = default_grammar()
        corpus = [u.sequence for u in generate_corpus(grammar, 12, seed=5)]
        cfg = small_config(epochs=2, batch_size=4)

        paths = []
        for run in range(2):
            ckpt = tr.pretrain(corpus, cfg, seed=11,
                               sil_index=grammar.vocab.sil_index)
            path = tmp_path / f"run{run}.ckpt"
            tr.save_checkpoint(path, ckpt.arrays, cfg, ckpt.step, ckpt.optim)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_training_loss_drops_thirty_percent_in_200_steps(self):
        # 50-utterance fixed corpus, tiny widths, seed 1
        grammar = default_grammar()
        corpus = [u.sequence for u in generate_corpus(grammar, 50, seed=1)]
        cfg = small_config(d=32, d_ff=48, epochs=72, batch_size=16)
        log = tr.ProgressLog()
        ckpt = tr.pretrain(corpus, cfg, seed=1,
                           sil_index=grammar.vocab.sil_index, log=log)
        assert ckpt.step >= 200
        train_losses = [v for _, split, metric, v in log.records
                        if split == "train" and metric == "plm_loss"]
        initial = train_losses[0]
        final = np.mean(train_losses[-5:])
        assert final < 0.7 * initial

    def test_all_utterances_skipped_is_fatal(self):
        # every frame is major-SIL, so no utterance can yield a plan
        frames = np.zeros((4, 4))
        frames[:, 0] = 1.0
        corpus = [PhonemePosteriorSequence(frames.copy(), utterance_id=f"s{i}")
                  for i in range(3)]
        cfg = small_config(epochs=1, batch_size=2, heldout_fraction=0.0)
        with pytest.raises(tr.TrainingError, match="eligible"):
            tr.pretrain(corpus, cfg, seed=1, sil_index=0)

    def test_progress_log_format(self, tmp_path):
        grammar = default_grammar()
        corpus = [u.sequence for u in generate_corpus(grammar, 4, seed=6)]
        cfg = small_config(epochs=1, batch_size=2)
        log_path = tmp_path / "progress.tsv"
        log = tr.ProgressLog(log_path)
        tr.pretrain(corpus, cfg, seed=6, sil_index=grammar.vocab.sil_index,
                    log=log)
        log.close()
        for line in log_path.read_text().splitlines():
            step, split, metric, value = line.split("\t")
            int(step)
            float(value)
            assert split in ("train", "heldout")
            assert metric == "plm_loss"


class TestFinetuneEvaluate:
    def test_separable_two_class_toy_reaches_zero_error(self):
        train = [one_hot_utterance(1, 0, utt_id=f"a{i}") for i in range(8)]
        train += [one_hot_utterance(2, 1, utt_id=f"b{i}") for i in range(8)]
        test = [one_hot_utterance(1, 0, utt_id="ta"),
                one_hot_utterance(2, 1, utt_id="tb")]
        cfg = small_config(finetune_lambda=0.0, finetune_epochs=30,
                           batch_size=4, lr=0.01)
        _, metrics = tr.finetune(None, train, test, cfg, seed=3, sil_index=0,
                                 classes=2)
        assert metrics.error_rate == 0.0
        assert metrics.micro_f1 == 1.0

    def test_identical_seeds_identical_metrics(self):
        grammar = default_grammar()
        utts = generate_corpus(grammar, 20, seed=7)
        cfg = small_config(finetune_epochs=3, batch_size=8)
        results = []
        for _ in range(2):
            _, metrics = tr.finetune(None, utts[:16], utts[16:], cfg, seed=9,
                                     sil_index=grammar.vocab.sil_index,
                                     classes=grammar.num_classes)
            results.append(metrics)
        assert results[0].error_rate == results[1].error_rate
        np.testing.assert_array_equal(results[0].confusion, results[1].confusion)

    def test_label_out_of_range(self):
        bad = [one_hot_utterance(1, 5, utt_id="x")]
        cfg = small_config(finetune_epochs=1)
        with pytest.raises(tr.DataError):
            tr.finetune(None, bad, [], cfg, seed=0, sil_index=0, classes=2)

    def test_evaluate_requires_classifier(self):
        from bertplm.config import encoder_config
        cfg = small_config()
        enc_cfg = encoder_config(cfg, vocab_size=4)
        params = init_params(enc_cfg, stream(8, "init"))
        with pytest.raises(tr.DataError):
            tr.evaluate(params, enc_cfg, [one_hot_utterance(1, 0)])


class TestAblations:
    def test_single_ratio_gives_one_row_marked_best(self):
        grammar = default_grammar()
        unlabeled = [u.sequence for u in generate_corpus(grammar, 10, seed=10)]
        labeled = generate_corpus(grammar, 10, seed=11, id_prefix="lab")
        cfg = small_config(epochs=1, finetune_epochs=1, batch_size=4)
        rows = tr.ablate_mask_ratio(unlabeled, labeled[:8], labeled[8:],
                                    ratios=[0.15], cfg=cfg, seed=12,
                                    sil_index=grammar.vocab.sil_index,
                                    classes=grammar.num_classes)
        assert len(rows) == 1
        assert rows[0].best and rows[0].setting == 0.15

    def test_fraction_rows_report_gap(self):
        grammar = default_grammar()
        unlabeled = [u.sequence for u in generate_corpus(grammar, 10, seed=13)]
        labeled = generate_corpus(grammar, 12, seed=14, id_prefix="lab")
        cfg = small_config(epochs=1, finetune_epochs=1, batch_size=4)
        rows = tr.ablate_fraction(unlabeled, labeled[:10], labeled[10:],
                                  fractions=[0.5, 1.0], cfg=cfg, seed=15,
                                  sil_index=grammar.vocab.sil_index,
                                  classes=grammar.num_classes)
        assert [r.fraction for r in rows] == [0.5, 1.0]
        for row in rows:
            assert row.gap == row.pretrained_accuracy - row.fresh_accuracy
