import pytest

from avasr.cli import main
from avasr.features import read_manifest


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny corpus + checkpoints shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    corpus_flags = ["--min-len", "2", "--max-len", "2"]
    assert main([
        "gen-corpus", "--out", str(root), "--n-train", "3", "--n-test", "2",
        "--seed", "0", *corpus_flags,
    ]) == 0
    assert main([
        "train", "--manifest", str(root / "train.tsv"), "--model-out", str(root / "a.ckpt"),
        "--kind", "audio", "--epochs", "1", "--batch-size", "3", "--enc-hidden", "4",
        "--enc-layers", "1", "--augment-snrs", "clean", "--seed", "1", *corpus_flags,
    ]) == 0
    assert main([
        "train-lm", "--manifest", str(root / "train.tsv"), "--lm-out", str(root / "lm.ckpt"),
        "--epochs", "1", "--hidden", "8", "--embed-dim", "4", "--val-fraction", "0.34",
        "--seed", "2", *corpus_flags,
    ]) == 0
    return root, corpus_flags


class TestGenCorpus:
    def test_manifest_counts(self, workspace):
        root, _ = workspace
        assert len(read_manifest(root / "train.tsv")) == 3
        assert len(read_manifest(root / "test.tsv")) == 2

    def test_byte_identical_rerun(self, tmp_path):
        flags = ["--min-len", "2", "--max-len", "2", "--seed", "7"]
        for sub in ("x", "y"):
            out = tmp_path / sub
            assert main(["gen-corpus", "--out", str(out), "--n-train", "2",
                         "--n-test", "1", *flags]) == 0
        assert (tmp_path / "x" / "train.tsv").read_bytes() == (
            tmp_path / "y" / "train.tsv"
        ).read_bytes()


class TestUsageErrors:
    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as e:
            main(["decode", "--no-such-flag"])
        assert e.value.code == 2

    def test_missing_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as e:
            main([])
        assert e.value.code == 2

    def test_runtime_error_exits_nonzero(self, tmp_path):
        code = main(["decode", "--model", str(tmp_path / "missing.ckpt"),
                     "--manifest", str(tmp_path / "missing.tsv")])
        assert code == 1


class TestDecode:
    def test_decode_writes_records(self, workspace, tmp_path):
        root, corpus_flags = workspace
        out = tmp_path / "decodes.tsv"
        code = main([
            "decode", "--model", str(root / "a.ckpt"), "--manifest", str(root / "test.tsv"),
            "--out", str(out), "--ctc-weight", "0.1", "--lm-weight", "0.4",
            "--lm", str(root / "lm.ckpt"), "--beam", "4", *corpus_flags,
        ])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("utt_id\ttext\tscore")
        assert len(lines) == 3

    def test_decode_with_noise_flags(self, workspace, tmp_path):
        root, corpus_flags = workspace
        code = main([
            "decode", "--model", str(root / "a.ckpt"), "--manifest", str(root / "test.tsv"),
            "--out", str(tmp_path / "d.tsv"), "--beam", "2", "--snr", "0",
            "--noise", "white", *corpus_flags,
        ])
        assert code == 0

    def test_late_fusion_requires_visual_model(self, workspace, tmp_path):
        root, corpus_flags = workspace
        code = main([
            "decode", "--model", str(root / "a.ckpt"), "--manifest", str(root / "test.tsv"),
            "--fusion", "late", "--beam", "2", *corpus_flags,
        ])
        assert code == 1


class TestEval:
    def test_identical_files_report_zero_wer(self, tmp_path, capsys):
        text = "utt0\tab ba\nutt1\tcc\n"
        ref = tmp_path / "ref.tsv"
        hyp = tmp_path / "hyp.tsv"
        ref.write_text(text)
        hyp.write_text(text)
        assert main(["eval", "--ref", str(ref), "--hyp", str(hyp)]) == 0
        out = capsys.readouterr().out
        assert "WER 0.0000" in out and "CER 0.0000" in out

    def test_missing_hypothesis_is_error(self, tmp_path):
        (tmp_path / "ref.tsv").write_text("utt0\tab\n")
        (tmp_path / "hyp.tsv").write_text("other\tab\n")
        assert main(["eval", "--ref", str(tmp_path / "ref.tsv"),
                     "--hyp", str(tmp_path / "hyp.tsv")]) == 1


class TestSweep:
    def test_sweep_writes_complete_csv(self, workspace, tmp_path):
        root, corpus_flags = workspace
        out = tmp_path / "sweep.csv"
        code = main([
            "sweep", "--audio-model", str(root / "a.ckpt"), "--manifest", str(root / "test.tsv"),
            "--out", str(out), "--systems", "A", "--snr", "0,10", "--noise", "white",
            "--beam", "2", "--seed", "3", *corpus_flags,
        ])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "noise,snr_db,system,wer,cer"
        assert len(lines) == 3
