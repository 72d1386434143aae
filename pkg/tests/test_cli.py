import csv

import numpy as np
import pytest

from ampost.cli import main
from ampost.flow import ConditionalFlow
from ampost.operators import load_dataset, load_measurements
from ampost.score import ScoreNetwork
from ampost.tensorcore.container import read_container


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.cfg").write_text(
        "score.hidden = 16,16\nscore.log_every = 0\n"
        "flow.steps = 1\nflow.hidden_width = 8\n"
        "distill.lr = 1e-3\ndistill.batch_size = 8\ndistill.log_every = 5\n"
    )
    assert main(["make-data", "--kind", "blobs8x8", "--n", "40", "--seed", "1", "--out", str(d / "data.amp")]) == 0
    assert main(["make-data", "--kind", "blobs8x8", "--n", "20", "--op", "mask:p=0.3", "--sigma-y", "0.1",
                 "--seed", "2", "--out", str(d / "train.amp")]) == 0
    assert main(["make-data", "--kind", "blobs8x8", "--n", "3", "--op", "mask:p=0.3", "--sigma-y", "0.1",
                 "--split", "eval", "--seed", "3", "--out", str(d / "eval.amp")]) == 0
    assert main(["train-score", "--config", str(d / "run.cfg"), "--data", str(d / "data.amp"),
                 "--iterations", "5", "--out", str(d / "score.amp")]) == 0
    assert main(["distill", "--score", str(d / "score.amp"), "--measurements", str(d / "train.amp"),
                 "--config", str(d / "run.cfg"), "--iterations", "10", "--trace", str(d / "trace.csv"),
                 "--out", str(d / "flow.amp")]) == 0
    return d


class TestPipeline:
    def test_data_containers(self, workdir):
        assert load_dataset(workdir / "data.amp").shape == (40, 64)
        mset, truth = load_measurements(workdir / "train.amp")
        assert truth is None and mset.masks.shape == (20, 64)
        _, truth = load_measurements(workdir / "eval.amp")
        assert truth.shape == (3, 64)

    def test_checkpoints(self, workdir):
        assert ScoreNetwork.load(workdir / "score.amp").hidden == (16, 16)
        flow, meta = ConditionalFlow.load(workdir / "flow.amp")
        assert flow.cond_dim == 128 and meta["condition_mode"][0] == 1.0

    def test_trace(self, workdir):
        rows = list(csv.reader(open(workdir / "trace.csv")))
        assert rows[0] == ["step", "fidelity", "prior", "entropy", "total"]
        assert [r[0] for r in rows[1:]] == ["5", "10"]

    @pytest.mark.parametrize("method", ["flow", "dps", "uncond"])
    def test_sample(self, workdir, method):
        out = workdir / f"sample_{method}.amp"
        args = ["sample", "--method", method, "--steps", "5", "--measurements", str(workdir / "eval.amp"),
                "--score", str(workdir / "score.amp"), "--flow", str(workdir / "flow.amp"),
                "--n-samples", "2", "--out", str(out)]
        assert main(args) == 0
        data = read_container(out)
        assert data["x"].shape == (3, 64)
        np.testing.assert_array_equal(data["id"], [0, 1, 2])

    def test_evaluate_writes_csv_and_images(self, workdir, capsys):
        out = workdir / "metrics.csv"
        assert main(["evaluate", "--method", "flow", "--flow", str(workdir / "flow.amp"),
                     "--measurements", str(workdir / "eval.amp"), "--n-samples", "4", "--image-shape", "8x8",
                     "--images", str(workdir / "img"), "--max-images", "2", "--out", str(out)]) == 0
        assert "psnr" in capsys.readouterr().out
        rows = list(csv.reader(open(out)))
        assert rows[0] == ["id", "psnr", "ssim", "mse", "wall_time", "nfe"] and len(rows) == 5
        assert len(list((workdir / "img").glob("*.pgm"))) == 6

    def test_evaluate_needs_truth(self, workdir):
        with pytest.raises(SystemExit):
            main(["evaluate", "--method", "flow", "--flow", str(workdir / "flow.amp"),
                  "--measurements", str(workdir / "train.amp"), "--out", str(workdir / "x.csv")])

    def test_seed_override(self, workdir, monkeypatch):
        monkeypatch.setenv("AMPOST_SEED", "11")
        main(["make-data", "--kind", "gauss2d", "--n", "5", "--seed", "1", "--out", str(workdir / "a.amp")])
        main(["make-data", "--kind", "gauss2d", "--n", "5", "--seed", "2", "--out", str(workdir / "b.amp")])
        assert (workdir / "a.amp").read_bytes() == (workdir / "b.amp").read_bytes()

    def test_oracle_check_reports(self, capsys):
        code = main(["oracle-check", "--iterations", "20", "--n-measurements", "50"])
        out = capsys.readouterr().out
        assert code in (0, 1)
        assert out.count("PASS") + out.count("FAIL") == 6
        assert "pf-ode log-likelihood" in out and "PASS" in out.splitlines()[0]
