import json
import os
import subprocess

import numpy as np
import pytest

import xsteer as xs


def tiny_config(out_dir):
    cfg = xs.default_config(42)
    cfg["out_dir"] = str(out_dir)
    cfg["teacher"].update(n_layers=2, d_model=16, n_heads=2, d_ff=32)
    cfg["student"].update(n_layers=2, d_model=8, n_heads=2, d_ff=16)
    cfg["teacher_train"].update(steps=10, warmup_steps=2)
    cfg["student_train"].update(steps=2, warmup_steps=1)
    cfg["corpus"] = {"verbal_items": 40, "math_items": 36}
    cfg["generation"]["max_new_tokens"] = 4
    cfg["alignment"]["lasso_max_iter"] = 200
    cfg["dissociation"].update(train_items=20, test_items=10)
    return cfg


def test_rng_is_frozen():
    rng = xs.SeededRng(42)
    assert [rng.next() for _ in range(3)] == [
        13930160852258120406,
        11788048577503494824,
        13874630024467741450,
    ]
    assert xs.SeededRng(42).permutation(10) == [1, 7, 9, 0, 3, 8, 4, 2, 5, 6]
    assert xs.SeededRng(42).uniform() == (13930160852258120406 >> 11) * 2.0**-53


def test_corpora_and_tokenizer():
    verbal = xs.gen_verbal_task(42, 20)
    math = xs.gen_math_task(43, 20)
    assert len(verbal) == 20 and len(math) == 20
    assert verbal[0].prompt == xs.make_prompt(verbal[0].question)
    assert math[0].gold_solution is not None and "####" in math[0].gold_solution
    tok = xs.Tokenizer()
    assert tok.vocab_size == 75
    assert tok.decode(tok.encode(verbal[3].prompt)) == verbal[3].prompt
    assert [it.id for it in xs.gen_verbal_task(42, 20)] == [it.id for it in verbal]


def test_scoring_fixtures():
    item = xs.QAItem()
    item.id = "v"
    item.domain = xs.Domain.verbal
    item.best_answer = "Zorvane"
    item.correct_answers = ["Zorvane"]
    assert xs.score_verbal("Answer: the capital is Zorvane", item)["correct"]
    assert xs.score_verbal("Answer: zorVANE", item)["correct"]
    assert not xs.score_verbal("Answer: the seat of government sits in Zorvan", item)["correct"]
    assert xs.extract_numeric_gold("#### $1,234") == 1234
    assert xs.score_numeric("Answer: $1,234", 1234)["correct"]
    assert not xs.score_numeric("Answer: 83", 82)["correct"]
    with pytest.raises(RuntimeError):
        xs.extract_numeric_gold("no marker")
    assert xs.correction_rate({"a": False, "b": False}, {"a": True, "b": False}, ["a", "b"]) == 50.0
    assert xs.correction_rate({}, {}, []) is None


def test_ridge_matches_numpy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(50, 8))
    y = rng.normal(size=(50, 6))
    lam = 0.1
    m = xs.fit_ridge(x, y, lam)
    a = np.hstack([x, np.ones((50, 1))])
    pen = lam * np.eye(9)
    pen[8, 8] = 0.0
    beta = np.linalg.solve(a.T @ a + pen, a.T @ y)
    np.testing.assert_allclose(m["weights"], beta[:8].T, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(m["bias"], beta[8], rtol=1e-9, atol=1e-12)
    pred = x @ m["weights"].T + m["bias"]
    assert xs.r2_score(pred, y) > xs.r2_score(np.zeros_like(y) + y.mean(0), y)


def test_lasso_and_permutation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(200, 10))
    y = 2.0 * x[:, [2]] + 0.05 * rng.normal(size=(200, 1))
    lasso = xs.fit_lasso(x, y, 0.05)
    assert np.flatnonzero(lasso["weights"][0]).tolist() == [2]
    perm = xs.fit_permutation_control(x, y, 0.1, 42)
    assert perm["reg_kind"] == "permutation_ridge"


def test_blend_and_grids():
    h = [0.6, 0.8]
    u = [0.8, -0.6]
    assert xs.blend(h, u, 0.0) == h
    assert xs.blend(h, u, 2.0) == [2 * u[0] - h[0], 2 * u[1] - h[1]]
    assert abs(np.linalg.norm(xs.blend([3.0, 4.0], [1.0, 1.0], 1.0)) - 5.0) < 1e-12
    assert xs.ALPHA_GRID == [0.25, 0.5, 0.8, 1.0, 2.0, 3.0, 5.0, 10.0]
    assert xs.DEPTH_GRID == [0.25, 0.5, 0.75, 0.9]
    assert xs.relative_depth_to_layer(0.75, 32) == 24


def test_config_round_trip():
    cfg = xs.default_config(7)
    assert cfg["derived_seeds"]["teacher_init"] == 9
    assert xs.resolve_config(cfg) == cfg
    bad = dict(cfg, unknown=1)
    with pytest.raises(RuntimeError, match="unknown"):
        xs.resolve_config(bad)


def test_tiny_pipeline(tmp_path):
    cfg = tiny_config(tmp_path / "run")
    xs.run_all(cfg)
    run = tmp_path / "run"
    for name in ["sweep_verbal.csv", "sweep_math.csv", "controls.csv", "dissociation.csv", "report.md"]:
        assert (run / name).exists(), name
    rows = (run / "sweep_math.csv").read_text().splitlines()
    assert rows[0] == "teacher_id,student_id,l_t,l_s,alpha,opportunities,corrected,delta_pct,r2_ridge"
    assert len(rows) == 129
    teacher = xs.TransformerModel.load(str(run / "models" / "teacher.toym"))
    items = xs.gen_math_task(1, 3)
    assert teacher.generate(items, 4) == teacher.generate(items, 4)
    assert teacher.activations(items, 1).shape == (3, 16)


@pytest.mark.skipif("XSTEER_CLI" not in os.environ, reason="CLI path not provided")
def test_cli_stages(tmp_path):
    cli = os.environ["XSTEER_CLI"]
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(tiny_config(tmp_path / "unused")))
    out = tmp_path / "cli"
    done = subprocess.run([cli, "corpus-gen", "--config", str(cfg_path), "--out", str(out)], capture_output=True)
    assert done.returncode == 0, done.stderr
    assert len((out / "corpus" / "verbal.jsonl").read_text().splitlines()) == 40
    written = json.loads((out / "run_config.json").read_text())
    assert written["out_dir"] == str(out)

    missing = subprocess.run([cli, "extract", "--config", str(cfg_path), "--out", str(out)], capture_output=True, text=True)
    assert missing.returncode != 0
    assert "teacher.toym" in missing.stderr
