import hashlib
import json

import numpy as np
import pytest

from crkit import io
from crkit.cli import main
from crkit.fixtures import bright_fraction


def digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def fixtures(tmp_path_factory):
    out = tmp_path_factory.mktemp("fx")
    assert main(["gen-fixtures", "--seed", "42", "--out-dir", str(out)]) == 0
    return out


def run_crselector(fx, out, *extra):
    return main(["crselector", "--features", str(fx / "features.crt"), "--image", str(fx / "image.crt"),
                 "--params", str(fx / "crselector.crp"), "--out-dir", str(out), *extra])


class TestGenFixtures:
    def test_same_seed_identical(self, fixtures, tmp_path):
        assert main(["gen-fixtures", "--seed", "42", "--out-dir", str(tmp_path)]) == 0
        assert digest(tmp_path) == digest(fixtures)

    def test_different_seed_differs(self, fixtures, tmp_path):
        main(["gen-fixtures", "--seed", "43", "--out-dir", str(tmp_path)])
        assert digest(tmp_path)["features.crt"] != digest(fixtures)["features.crt"]

    def test_manifest(self, fixtures):
        manifest = json.loads((fixtures / "manifest.json").read_text())
        assert manifest["seed"] == 42
        hashes = digest(fixtures)
        assert {e["name"] for e in manifest["files"]} == set(hashes) - {"manifest.json"}
        for entry in manifest["files"]:
            assert hashes[entry["name"]] == entry["sha256"]
            assert entry["shape"]

    @pytest.mark.parametrize("fraction", [0.02, 0.05, 0.1])
    def test_crack_fraction(self, fraction, tmp_path):
        main(["gen-fixtures", "--seed", "7", "--size", "32", "--crack-fraction", str(fraction),
              "--out-dir", str(tmp_path)])
        image = io.load_tensor(tmp_path / "image.crt")
        assert abs(bright_fraction(image) - fraction) <= 0.01

    def test_indivisible_size(self, tmp_path, capsys):
        assert main(["gen-fixtures", "--size", "7", "--window", "2", "--out-dir", str(tmp_path)]) == 1
        assert "divisible" in capsys.readouterr().err


class TestCRSelectorCommand:
    def test_outputs_and_determinism(self, fixtures, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run_crselector(fixtures, a) == 0
        assert run_crselector(fixtures, b) == 0
        assert digest(a) == digest(b)
        assert set(digest(a)) == {"output.crt", "keymask.txt", "heatmap_input.pgm",
                                  "heatmap_output.pgm", "meta.json"}
        assert json.loads((a / "meta.json").read_text())["seed"] == 42

    def test_seed_changes_mask_only_through_noise(self, fixtures, tmp_path):
        run_crselector(fixtures, tmp_path / "a", "--soft-mask", "--seed", "1")
        run_crselector(fixtures, tmp_path / "b", "--soft-mask", "--seed", "2")
        run_crselector(fixtures, tmp_path / "c", "--soft-mask", "--seed", "1")
        assert digest(tmp_path / "a") == digest(tmp_path / "c")
        assert (tmp_path / "a" / "keymask.txt").read_text() != (tmp_path / "b" / "keymask.txt").read_text()

    def test_zero_out_conv_is_identity(self, fixtures, tmp_path):
        rc = main(["crselector", "--features", str(fixtures / "features.crt"),
                   "--image", str(fixtures / "image.crt"),
                   "--params", str(fixtures / "crselector_zero_out.crp"), "--out-dir", str(tmp_path)])
        assert rc == 0
        out = (tmp_path / "output.crt").read_bytes()
        assert out[20:] == (fixtures / "features.crt").read_bytes()[20:]

    def test_keymask_values(self, fixtures, tmp_path):
        run_crselector(fixtures, tmp_path)
        vals = [float(v) for line in (tmp_path / "keymask.txt").read_text().splitlines()
                if not line.startswith("#") for v in line.split()]
        assert len(vals) == 16 and set(vals) <= {0.0, 1.0}

    def test_bad_window(self, fixtures, tmp_path, capsys):
        assert run_crselector(fixtures, tmp_path, "--window", "3") == 1
        assert "error" in capsys.readouterr().err

    def test_missing_file(self, fixtures, tmp_path):
        assert main(["crselector", "--features", str(tmp_path / "nope.crt"),
                     "--image", str(fixtures / "image.crt"),
                     "--params", str(fixtures / "crselector.crp"), "--out-dir", str(tmp_path)]) == 1

    def test_corrupt_params(self, fixtures, tmp_path):
        bad = tmp_path / "bad.crp"
        bad.write_bytes((fixtures / "crselector.crp").read_bytes()[:-3])
        assert main(["crselector", "--features", str(fixtures / "features.crt"),
                     "--image", str(fixtures / "image.crt"),
                     "--params", str(bad), "--out-dir", str(tmp_path / "o")]) == 1

    def test_usage_error_exit_code(self):
        assert main(["crselector"]) == 1


class TestScaCommand:
    def test_zero_gate(self, fixtures, tmp_path):
        levels = [str(fixtures / f"level{i}.crt") for i in range(3)]
        assert main(["sca", "--params", str(fixtures / "sca_zero.sca"), *levels,
                     "--out-dir", str(tmp_path)]) == 0
        for i in range(3):
            src = io.load_tensor(fixtures / f"level{i}.crt")
            out = io.load_tensor(tmp_path / f"level{i}.crt")
            assert out.tobytes() == (np.float32(1.5) * src).tobytes()
        assert (tmp_path / "gamma.txt").read_text().split() == ["0.5"] * 3

    def test_gamma_in_range(self, fixtures, tmp_path):
        levels = [str(fixtures / f"level{i}.crt") for i in range(3)]
        main(["sca", "--params", str(fixtures / "sca.sca"), *levels, "--out-dir", str(tmp_path)])
        gamma = [float(v) for v in (tmp_path / "gamma.txt").read_text().split()]
        assert all(0 <= g <= 1 for g in gamma)

    def test_channel_mismatch(self, fixtures, tmp_path):
        io.save_tensor(tmp_path / "odd.crt", np.zeros((1, 3, 2, 2)))
        assert main(["sca", "--params", str(fixtures / "sca.sca"), str(tmp_path / "odd.crt"),
                     "--out-dir", str(tmp_path / "o")]) == 1


class TestEvalCommand:
    def test_perfect(self, fixtures, tmp_path, capsys):
        assert main(["eval", "--gt", str(fixtures / "gt.txt"), "--dets", str(fixtures / "dets_perfect.txt"),
                     "--out-dir", str(tmp_path)]) == 0
        text = (tmp_path / "metrics.txt").read_text()
        assert "map=1.0" in text and "map50=1.0" in text
        assert capsys.readouterr().out == text

    def test_empty_detections(self, fixtures, tmp_path, capsys):
        (tmp_path / "empty.txt").write_text("")
        assert main(["eval", "--gt", str(fixtures / "gt.txt"), "--dets", str(tmp_path / "empty.txt")]) == 0
        assert "map=0.0" in capsys.readouterr().out

    def test_swapped_files(self, fixtures):
        assert main(["eval", "--gt", str(fixtures / "dets.txt"), "--dets", str(fixtures / "gt.txt")]) == 1

    def test_malformed_line(self, fixtures, tmp_path, capsys):
        (tmp_path / "d.txt").write_text("img0 c0 1 2 3\n")
        assert main(["eval", "--gt", str(fixtures / "gt.txt"), "--dets", str(tmp_path / "d.txt")]) == 1
        assert "d.txt:1" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_passes(self, tmp_path, capsys):
        assert main(["gradcheck", "--module", "sca-head", "--out-dir", str(tmp_path)]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines and all(line.endswith("pass=true") for line in lines)
        meta = json.loads((tmp_path / "meta.json").read_text())
        assert meta["checks"] == len(lines) and meta["failed"] == 0

    def test_zero_threshold_fails(self, capsys):
        assert main(["gradcheck", "--module", "tensor-core", "--threshold", "0"]) == 2
        assert "pass=false" in capsys.readouterr().out

    def test_all_modules_enough_sites(self, capsys):
        assert main(["gradcheck"]) == 0
        assert len(capsys.readouterr().out.splitlines()) >= 500

    def test_unknown_module(self):
        assert main(["gradcheck", "--module", "bogus"]) == 1
