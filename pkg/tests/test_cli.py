import subprocess
import sys

import numpy as np
import pytest

from picocodec.cli import main
from picocodec.imageio import read_image, to_unit, write_image
from picocodec.metrics import RDCurve, RDPoint, emit_rd_csv
from picocodec.nas import read_records_csv, load_space


def write_random(path, h, w, seed=0):
    img = np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)
    write_image(path, img)
    return img


class TestImageIO:
    @pytest.mark.parametrize("ext", [".ppm", ".png"])
    def test_roundtrip(self, tmp_path, ext):
        p = tmp_path / f"a{ext}"
        img = write_random(p, 13, 17)
        np.testing.assert_array_equal(read_image(p), img)

    def test_grey_expands(self, tmp_path):
        from PIL import Image
        p = tmp_path / "g.png"
        Image.fromarray(np.arange(12, dtype=np.uint8).reshape(3, 4), "L").save(p)
        img = read_image(p)
        assert img.shape == (3, 4, 3)
        np.testing.assert_array_equal(img[..., 0], img[..., 2])

    def test_rejects(self, tmp_path):
        with pytest.raises(ValueError):
            write_image(tmp_path / "a.jpg", np.zeros((2, 2, 3), np.uint8))
        with pytest.raises(ValueError):
            write_image(tmp_path / "a.png", np.zeros((2, 2), np.uint8))
        assert to_unit(np.array([255], np.uint8))[0] == 1.0


class TestNasCli:
    def test_enumerate(self, capsys):
        assert main(["nas", "enumerate", "--space", "table5b"]) == 0
        assert "1492992" in capsys.readouterr().out
        assert main(["nas", "enumerate", "--space", "table5a"]) == 0
        assert "746496" in capsys.readouterr().out

    def test_pipeline(self, tmp_path, capsys):
        listing = tmp_path / "all.csv"
        assert main(["nas", "enumerate", "--space", "table5b", "--out", str(listing), "--limit", "3000"]) == 0
        space = load_space("table5b")
        recs = read_records_csv(listing, space)
        assert len(recs) == 3000
        sampled = tmp_path / "s.csv"
        assert main(["nas", "sample", "--space", "table5b", "--in", str(listing), "--out", str(sampled),
                     "--n", "500", "--target-ms", "45", "--tol", "0.1"]) == 0
        kept = read_records_csv(sampled, space)
        assert kept and all(40.5 <= r.runtime_ms <= 49.5 for r in kept)
        metrics = tmp_path / "m.csv"
        metrics.write_text("config_id,metric\n" + "".join(f"{r.index},{-r.index}\n" for r in kept))
        top = tmp_path / "top.csv"
        assert main(["nas", "rank", "--space", "table5b", "--in", str(sampled), "--out", str(top),
                     "--k", "2", "--metrics", str(metrics)]) == 0
        assert [r.index for r in read_records_csv(top, space)] == sorted((r.index for r in kept), reverse=True)[:2]

    def test_bad_space(self, capsys):
        assert main(["nas", "enumerate", "--space", "/nonexistent.json"]) == 2
        assert "error" in capsys.readouterr().err


class TestCodecCli:
    def test_encode_decode(self, tmp_path):
        src = tmp_path / "in.ppm"
        img = write_random(src, 30, 45)
        w = tmp_path / "w.pico"
        assert main(["weights", "--seed", "1", "--out", str(w)]) == 0
        bits = tmp_path / "x.bin"
        assert main(["encode", "--in", str(src), "--out", str(bits), "--level", "30", "--weights", str(w)]) == 0
        out = tmp_path / "out.png"
        assert main(["decode", "--in", str(bits), "--out", str(out), "--weights", str(w)]) == 0
        dec = read_image(out)
        assert dec.shape == img.shape
        out2 = tmp_path / "out2.png"
        assert main(["decode", "--in", str(bits), "--out", str(out2), "--seed", "1", "--sequential"]) == 0
        np.testing.assert_array_equal(read_image(out2), dec)

    def test_schedule_mismatch(self, tmp_path, capsys):
        w = tmp_path / "w.pico"
        main(["weights", "--seed", "1", "--out", str(w)])
        src = tmp_path / "in.png"
        write_random(src, 8, 8)
        rc = main(["encode", "--in", str(src), "--out", str(tmp_path / "x"), "--level", "1",
                   "--weights", str(w), "--schedule", "checkerboard"])
        assert rc == 2

    def test_corrupt_stream(self, tmp_path, capsys):
        bits = tmp_path / "x.bin"
        bits.write_bytes(b"garbage")
        assert main(["decode", "--in", str(bits), "--out", str(tmp_path / "o.png"), "--seed", "0"]) == 2


class TestEvalCli:
    def test_metrics(self, tmp_path, capsys):
        ref, test = tmp_path / "ref", tmp_path / "test"
        ref.mkdir()
        test.mkdir()
        img = write_random(ref / "a.png", 40, 50)
        write_image(test / "a.png", img)
        assert main(["eval", "metrics", "--ref", str(ref), "--test", str(test), "--grid", "16x16"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].startswith("image,mse,psnr")
        assert lines[1].split(",")[1:3] == ["0", "inf"]

    def test_bad_grid(self, tmp_path):
        with pytest.raises(SystemExit):
            main(["eval", "metrics", "--ref", str(tmp_path), "--test", str(tmp_path), "--grid", "16x8"])

    def test_bdrate(self, tmp_path, capsys):
        rates, quals = [0.1, 0.2, 0.4, 0.8], [30.0, 33.0, 35.0, 37.0]
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        emit_rd_csv([RDCurve("x", "psnr", [RDPoint(i, r, q) for i, (r, q) in enumerate(zip(rates, quals))])], a)
        emit_rd_csv([RDCurve("y", "psnr", [RDPoint(i, 2 * r, q) for i, (r, q) in enumerate(zip(rates, quals))])], b)
        assert main(["eval", "bdrate", "--anchor", str(a), "--test", str(b)]) == 0
        assert "+100.000%" in capsys.readouterr().out

    def test_elo(self, tmp_path, capsys):
        v = tmp_path / "v.csv"
        v.write_text("a,b,wins_a,wins_b\nours,jpeg,80,20\n")
        assert main(["eval", "elo", "--votes", str(v)]) == 0
        first = capsys.readouterr().out.splitlines()[0]
        assert first.startswith("ours")


def test_console_module_help():
    res = subprocess.run([sys.executable, "-m", "picocodec.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "nas" in res.stdout
