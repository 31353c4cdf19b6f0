"""Command-line behavior and exit codes."""

import numpy as np

from kwsextract.audio import write_wav
from kwsextract.cli import main


class TestExtractCommand:
    def test_end_to_end(self, tiny_model_dir, corpus_dir, tmp_path, capsys):
        out = tmp_path / "corpus.kwsfeat"
        code = main(["extract", "--model", f"hubert/{tiny_model_dir}",
                     "--audio", corpus_dir, "--out", str(out)])
        assert code == 0
        assert "wrote 7 utterances" in capsys.readouterr().out
        assert out.read_text("ascii").startswith("kwsfeat pooled v1 ")

    def test_unsupported_family_is_usage_error(self, corpus_dir, tmp_path,
                                               capsys):
        code = main(["extract", "--model", "cpc/whatever",
                     "--audio", corpus_dir,
                     "--out", str(tmp_path / "x.kwsfeat")])
        assert code == 2
        assert "usage error" in capsys.readouterr().err

    def test_missing_corpus_is_runtime_error(self, tiny_model_dir, tmp_path,
                                             capsys):
        code = main(["extract", "--model", f"hubert/{tiny_model_dir}",
                     "--audio", str(tmp_path / "nowhere"),
                     "--out", str(tmp_path / "x.kwsfeat")])
        assert code == 1
        assert "error" in capsys.readouterr().err

    def test_unknown_flag_exits_2(self, capsys):
        assert main(["extract", "--frobnicate"]) == 2
        capsys.readouterr()

    def test_no_subcommand_exits_2(self, capsys):
        assert main([]) == 2
        capsys.readouterr()


class TestClipNoiseCommand:
    def test_end_to_end(self, tmp_path, capsys):
        rng = np.random.default_rng(2)
        noise = tmp_path / "noise"
        noise.mkdir()
        write_wav(noise / "a.wav", rng.normal(size=40000) * 0.1, 16000)
        write_wav(noise / "b.wav", rng.normal(size=40000) * 0.1, 16000)
        split = tmp_path / "split.txt"
        split.write_text("a.wav train\nb.wav test\n", encoding="ascii")
        out = tmp_path / "clips"
        code = main(["clip-noise", "--noise", str(noise), "--split",
                     str(split), "--out", str(out), "--len", "1.0",
                     "--per-file", "3", "--seed", "9"])
        assert code == 0
        assert "train=3 test=3" in capsys.readouterr().out.replace(
            "test=3 train=3", "train=3 test=3")
        assert (out / "manifest.tsv").exists()

    def test_malformed_split_is_runtime_error(self, tmp_path, capsys):
        noise = tmp_path / "noise"
        noise.mkdir()
        write_wav(noise / "a.wav", np.zeros(16000), 16000)
        split = tmp_path / "split.txt"
        split.write_text("a.wav sometimes\n", encoding="ascii")
        code = main(["clip-noise", "--noise", str(noise), "--split",
                     str(split), "--out", str(tmp_path / "clips")])
        assert code == 1
        assert "error" in capsys.readouterr().err
