import pytest

from bertplm import cli
from bertplm import corpus as cp
from bertplm.config import ConfigError, parse_config


class TestParseConfig:
    def test_empty_file_gives_all_defaults(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("")
        cfg = parse_config(path)
        assert (cfg.layers, cfg.d, cfg.d_ff, cfg.heads) == (4, 576, 1600, 8)
        assert cfg.dropout == 0.1
        assert cfg.lr == 3e-5
        assert cfg.max_seq_len == 320
        assert cfg.mask_ratio_max == 0.15
        assert cfg.sil_threshold == 0.5
        assert cfg.plm_weighting == "mean"
        assert cfg.finetune_lambda == 1.0

    def test_file_value_applies(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("mask_ratio_max = 0.20\n# comment\n")
        assert parse_config(path).mask_ratio_max == 0.20

    def test_type_mismatch_names_key_and_line(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs = 5\nlayers = abc\n")
        with pytest.raises(ConfigError, match="line 2.*layers"):
            parse_config(path)

    def test_unknown_key_lists_valid_keys(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("banana = 1\n")
        with pytest.raises(ConfigError, match="valid keys.*mask_ratio_max"):
            parse_config(path)

    def test_overrides_win_over_file(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("epochs = 5\n")
        cfg = parse_config(path, {"epochs": "9"})
        assert cfg.epochs == 9

    def test_tiny_profile_rewrites_dims_but_explicit_keys_win(self):
        cfg = parse_config(None, {"profile": "tiny"})
        assert (cfg.layers, cfg.d, cfg.d_ff, cfg.heads) == (2, 64, 128, 4)
        assert cfg.lr == 1e-3
        cfg = parse_config(None, {"profile": "tiny", "d": "32"})
        assert cfg.d == 32

    def test_round_trip_through_text(self):
        from bertplm.config import config_text, parse_config_text
        cfg = parse_config(None, {"profile": "tiny", "epochs": "3"})
        assert parse_config_text(config_text(cfg)) == cfg


class TestExitCodes:
    def test_no_arguments_is_usage_error(self, capsys):
        assert cli.main([]) == cli.EXIT_USAGE

    def test_unknown_subcommand(self, capsys):
        assert cli.main(["frobnicate"]) == cli.EXIT_USAGE

    def test_missing_required_flag(self, capsys):
        assert cli.main(["pretrain"]) == cli.EXIT_USAGE

    def test_corrupt_corpus_is_data_error(self, tmp_path, capsys):
        corpus = tmp_path / "bad.pps"
        corpus.write_bytes(b"XXXX" + b"\x00" * 12)
        vocab = tmp_path / "v.txt"
        cp.write_vocab(cp.default_grammar().vocab, vocab)
        code = cli.main(["pretrain", "--data", str(corpus),
                         "--vocab", str(vocab),
                         "--out", str(tmp_path / "m.ckpt")])
        assert code == cli.EXIT_DATA

    def test_missing_file_is_data_error(self, tmp_path, capsys):
        code = cli.main(["evaluate", "--ckpt", str(tmp_path / "nope.ckpt"),
                         "--data", str(tmp_path / "nope.pps"),
                         "--manifest", str(tmp_path / "nope.tsv"),
                         "--vocab", str(tmp_path / "nope.txt")])
        assert code == cli.EXIT_DATA

    def test_empty_evaluation_set_is_data_error(self, tmp_path, capsys):
        # error rate is undefined on an empty test set
        from bertplm.config import parse_config
        from bertplm.encoder import init_params
        from bertplm import trainer as tr
        from bertplm.rng import stream
        grammar = cp.default_grammar()
        vocab_path = tmp_path / "v.txt"
        cp.write_vocab(grammar.vocab, vocab_path)
        cp.write_corpus([], tmp_path / "empty.pps", grammar.vocab.size)
        (tmp_path / "empty.tsv").write_text("")
        cfg = parse_config(None, {"profile": "tiny", "d": "16", "d_ff": "24",
                                  "heads": "2", "layers": "1"})
        from bertplm.config import encoder_config
        params = init_params(encoder_config(cfg, grammar.vocab.size),
                             stream(0, "i"), classes=3)
        tr.save_checkpoint(tmp_path / "m.ckpt", params, cfg, step=0)
        code = cli.main(["evaluate", "--ckpt", str(tmp_path / "m.ckpt"),
                         "--data", str(tmp_path / "empty.pps"),
                         "--manifest", str(tmp_path / "empty.tsv"),
                         "--vocab", str(vocab_path)])
        assert code == cli.EXIT_DATA

    def test_verification_failure_exits_three(self, capsys, monkeypatch):
        import bertplm.cli as cli_mod

        def fake_verify(p, t_len, c, trials, rng, vocab_size=4, **kw):
            from bertplm.oracle import TheoremReport
            return [TheoremReport(T=t_len, c=c, lhs=0.0, rhs_exact=1.0,
                                  rhs_paper=1.0, dev_exact=1.0, dev_paper=1.0,
                                  permutations_enumerated=2,
                                  subsets_enumerated=1)]

        monkeypatch.setattr(cli_mod.oracle, "verify_theorem", fake_verify)
        code = cli.main(["verify-theorem", "--max-T", "2", "--trials", "1"])
        assert code == cli.EXIT_VERIFY


class TestGenData:
    def test_files_created_and_clean(self, tmp_path, capsys):
        out = tmp_path / "corpus.pps"
        manifest = tmp_path / "labels.tsv"
        vocab = tmp_path / "vocab.txt"
        code = cli.main(["gen-data", "--utterances", "12", "--seed", "42",
                         "--out", str(out), "--manifest", str(manifest),
                         "--vocab", str(vocab)])
        assert code == cli.EXIT_OK
        loaded_vocab = cp.read_vocab(vocab)
        sequences = cp.read_corpus(out, expected_vocab_size=loaded_vocab.size)
        assert len(sequences) == 12
        for seq in sequences:
            assert cp.validate_sequence(seq) == []
        labels = cp.read_manifest(manifest)
        assert len(labels) == 12

    def test_unknown_grammar(self, tmp_path, capsys):
        code = cli.main(["gen-data", "--grammar", "martian",
                         "--utterances", "1", "--out", str(tmp_path / "x.pps")])
        assert code == cli.EXIT_USAGE


class TestVerifyTheorem:
    def test_small_run_passes(self, capsys):
        code = cli.main(["verify-theorem", "--max-T", "3", "--trials", "2",
                         "--seed", "7"])
        assert code == cli.EXIT_OK
        out = capsys.readouterr().out
        header, *rows = [l for l in out.splitlines() if l and "ok:" not in l]
        assert header.split("\t") == ["T", "c", "dev_exact", "dev_paper", "trials"]
        assert len(rows) == 3  # (T=2,c=1), (T=3,c=1), (T=3,c=2)
        for row in rows:
            t_len, c, dev_exact, dev_paper, trials = row.split("\t")
            assert float(dev_exact) <= 1e-9
            assert int(trials) == 4


class TestGradCheck:
    def test_quick_profile_passes(self, capsys):
        code = cli.main(["grad-check", "--quick", "--seed", "3"])
        assert code == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "bert_plm_loss" in out and "finetune_loss" in out


class TestPipeline:
    def test_gen_pretrain_finetune_evaluate(self, tmp_path, capsys):
        corpus = tmp_path / "c.pps"
        manifest = tmp_path / "c.tsv"
        vocab = tmp_path / "v.txt"
        assert cli.main(["gen-data", "--utterances", "20", "--seed", "1",
                         "--out", str(corpus), "--manifest", str(manifest),
                         "--vocab", str(vocab)]) == cli.EXIT_OK

        small = ["--set", "profile=tiny", "--set", "d=16", "--set", "d_ff=24",
                 "--set", "heads=2", "--set", "layers=1",
                 "--set", "epochs=1", "--set", "finetune_epochs=1",
                 "--set", "batch_size=8", "--set", "dropout=0.0"]
        ckpt = tmp_path / "pre.ckpt"
        assert cli.main(["pretrain", "--data", str(corpus), "--vocab", str(vocab),
                         "--out", str(ckpt), "--seed", "2"] + small) == cli.EXIT_OK

        final = tmp_path / "final.ckpt"
        assert cli.main(["finetune", "--data", str(corpus),
                         "--manifest", str(manifest), "--vocab", str(vocab),
                         "--ckpt", str(ckpt),
                         "--test-data", str(corpus),
                         "--test-manifest", str(manifest),
                         "--out", str(final), "--seed", "3"] + small) == cli.EXIT_OK

        assert cli.main(["evaluate", "--ckpt", str(final), "--data", str(corpus),
                         "--manifest", str(manifest),
                         "--vocab", str(vocab)]) == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "error_rate" in out and "macro_f1" in out

    def test_print_config(self, capsys):
        code = cli.main(["verify-theorem", "--max-T", "2", "--trials", "1",
                         "--print-config", "--set", "epochs=2"])
        assert code == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "epochs = 2" in out
