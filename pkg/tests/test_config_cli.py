import json
import subprocess
import sys

import pytest

from zcd import checks, cli
from zcd.config import SEED_ENV, ConfigError, RunConfig


def run(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


# -- RunConfig --------------------------------------------------------------------


def test_defaults():
    cfg = RunConfig()
    assert (cfg.backbone_profile, cfg.fpn_scheme, cfg.head_scheme) == ("faithful-r50", "als-light", "cls-first")
    assert (cfg.anchor_free, cfg.anchors_per_loc, cfg.num_classes) == (False, 9, 80)
    assert cfg.attention_dim_d is None and cfg.build().fpn.attention_dim == 32
    assert (cfg.seed, cfg.image_size, cfg.rounds) == (42, [256, 320], 10)


def test_unknown_key_rejected_by_name():
    with pytest.raises(ConfigError, match="'colour'"):
        RunConfig.from_mapping({"colour": "red"})


@pytest.mark.parametrize("key,value", [("rounds", 9), ("fpn_scheme", "bifpn"), ("image_size", [32, 64]),
                                       ("anchors_per_loc", 0), ("seed", -3), ("anchor_free", "yes"),
                                       ("backbone_profile", "r18"), ("tiny_channels", [8, 16])])
def test_bad_values_name_the_key(key, value):
    with pytest.raises(ConfigError, match=key):
        RunConfig.from_mapping({key: value})


def test_precedence_file_env_flag(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 1, "fpn_scheme": "als"}))
    assert RunConfig.load(path, env={}).seed == 1
    assert RunConfig.load(path, env={SEED_ENV: "5"}).seed == 5
    cfg = RunConfig.load(path, {"seed": 9}, env={SEED_ENV: "5"})
    assert cfg.seed == 9 and cfg.fpn_scheme == "als"


def test_bad_file_and_env(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        RunConfig.load(bad, env={})
    with pytest.raises(ConfigError, match=SEED_ENV):
        RunConfig.load(env={SEED_ENV: "abc"})


def test_anchor_free_head_defaults():
    hc = RunConfig(anchor_free=True).head_config()
    assert hc.anchor_free and hc.centerness and hc.norm_affine and hc.cls_channels == 80


# -- params / flops -----------------------------------------------------------------


def _total(capsys, *flags):
    code, out, _ = run(["params", *flags], capsys)
    assert code == 0
    line = next(ln for ln in out.splitlines() if ln.startswith("total"))
    return int(line.split()[1].replace(",", ""))


def test_params_reduction_and_head_equality(capsys):
    assert _total(capsys, "--fpn-scheme", "als-light") < _total(capsys, "--fpn-scheme", "baseline")
    assert _total(capsys, "--head-scheme", "cls-first") == _total(capsys, "--head-scheme", "parallel")


def test_params_prints_rounded_and_exact(capsys):
    _, out, _ = run(["params", "--fpn-scheme", "als-light"], capsys)
    assert "36,484,564" in out and "36.5" in out


def test_config_errors_exit_2(capsys, tmp_path):
    code, _, err = run(["params", "--fpn-scheme", "bogus"], capsys)
    assert code == 2 and "fpn_scheme" in err
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"head_sheme": "parallel"}))
    code, _, err = run(["params", "--config", str(path)], capsys)
    assert code == 2 and "head_sheme" in err


def test_json_report_keys(capsys, tmp_path):
    p = tmp_path / "p.json"
    assert run(["params", "--json", str(p)], capsys)[0] == 0
    d = json.loads(p.read_text())
    assert isinstance(d["params"]["total"], int) and set(d["params"]["by_component"]) == {
        "trunk", "fpn", "heads"}
    f = tmp_path / "f.json"
    assert run(["flops", "--backbone-profile", "tiny", "--json", str(f)], capsys)[0] == 0
    assert json.loads(f.read_text())["flops"]["total"] > 0


def test_flops_identical_across_heads(capsys, tmp_path):
    totals = []
    for scheme in ("parallel", "cls-first", "reg-first"):
        f = tmp_path / f"{scheme}.json"
        run(["flops", "--head-scheme", scheme, "--json", str(f)], capsys)
        totals.append(json.loads(f.read_text())["flops"]["total"])
    assert len(set(totals)) == 1


# -- gradcheck / verify ----------------------------------------------------------------


def test_verify_only_gradcheck(capsys, tmp_path):
    j = tmp_path / "g.json"
    code, out, _ = run(["verify", "--only", "gradcheck", "--json", str(j)], capsys)
    assert code == 0 and "gradcheck.suite" in out and "params." not in out
    checks_run = json.loads(j.read_text())["verify"]["checks"]
    assert [c["name"] for c in checks_run] == ["gradcheck.suite"]
    assert max(checks_run[0]["measured"]["max_rel_err"].values()) < 1e-4


def test_gradcheck_command_json(capsys, tmp_path, monkeypatch):
    names = {"conv2d", "relu", "head_cls_first"}
    real = cli.gradcheck.run_suite
    monkeypatch.setattr(cli.gradcheck, "run_suite", lambda seed: real(seed=seed, names=names))
    j = tmp_path / "g.json"
    code, out, _ = run(["gradcheck", "--json", str(j)], capsys)
    assert code == 0 and "3/3 passed" in out
    assert set(json.loads(j.read_text())["gradcheck"]["max_rel_err"]) == names


CHEAP = ["params", "flops", "attention", "structure"]


def _matrix(capsys, tmp_path, *flags):
    j = tmp_path / "v.json"
    code, _, _ = run(["verify", *sum((["--only", g] for g in CHEAP), []), "--json", str(j), *flags],
                     capsys)
    return code, {c["name"]: c["passed"] for c in json.loads(j.read_text())["verify"]["checks"]}


def test_verify_matrix_is_seed_robust(capsys, tmp_path):
    code42, m42 = _matrix(capsys, tmp_path)
    code7, m7 = _matrix(capsys, tmp_path, "--backbone-profile", "tiny", "--seed", "7")
    assert code42 == code7 == 0 and m42 == m7 and all(m42.values())


def test_verify_output_lists_module_claim_and_measurement(capsys, tmp_path):
    j = tmp_path / "v.json"
    code, out, _ = run(["verify", "--only", "attention", "--json", str(j)], capsys)
    assert code == 0
    for c in json.loads(j.read_text())["verify"]["checks"]:
        assert {"name", "module", "claim", "passed", "measured"} <= set(c)
        assert f"[{c['module']}]" in out
    assert out.count("measured:") == 5


def test_verify_failure_exits_1(capsys, monkeypatch):
    broken = checks.Check("attention.broken", "attention", "sa-fpn", "always fails",
                          lambda cfg: (False, {"why": "forced"}))
    monkeypatch.setattr(checks, "CHECKS", [*checks.CHECKS, broken])
    code, out, _ = run(["verify", "--only", "attention.broken"], capsys)
    assert code == 1 and "FAIL" in out and "forced" in out


def test_verify_crashing_check_is_a_failure(capsys, monkeypatch):
    def boom(cfg):
        raise RuntimeError("kaput")

    monkeypatch.setattr(checks, "CHECKS", [checks.Check("structure.boom", "structure", "x", "c", boom)])
    code, out, _ = run(["verify"], capsys)
    assert code == 1 and "kaput" in out


def test_verify_unknown_group_is_config_error(capsys):
    assert run(["verify", "--only", "everything"], capsys)[0] == 2


# -- forward ----------------------------------------------------------------------------


def test_forward_levels_and_determinism(capsys, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    flags = ["--backbone-profile", "tiny", "--image-size", "64", "96"]
    assert run(["forward", *flags, "--json", str(a)], capsys)[0] == 0
    assert run(["forward", *flags, "--json", str(b)], capsys)[0] == 0
    la, lb = json.loads(a.read_text())["forward"]["levels"], json.loads(b.read_text())["forward"]["levels"]
    assert la == lb and sorted(la) == ["P3", "P4", "P5", "P6", "P7"]
    assert all(v["shape"][1] == 256 for v in la.values())


def test_forward_default_config(capsys):
    code, out, _ = run(["forward"], capsys)
    assert code == 0
    rows = [ln for ln in out.splitlines() if ln.startswith("P")]
    assert len(rows) == 5 and all("(1, 256," in r for r in rows)


def test_dump_attention_rows_sum_to_one(capsys):
    code, out, _ = run(["forward", "--backbone-profile", "tiny", "--image-size", "64", "64",
                        "--dump-attention"], capsys)
    assert code == 0
    sums = {}
    for line in out.splitlines():
        parts = line.split(",")
        if len(parts) == 4 and parts[0].isdigit():
            key = (int(parts[0]), int(parts[2]))
            sums[key] = sums.get(key, 0.0) + float(parts[3])
    assert len(sums) == 5 * 256 and all(abs(s - 1) <= 1e-12 for s in sums.values())


# -- bench --------------------------------------------------------------------------


def test_bench_flags(capsys, tmp_path):
    j = tmp_path / "b.json"
    code, out, _ = run(["bench", "--backbone-profile", "tiny", "--image-size", "64", "64",
                        "--baseline-scheme", "reg-first", "--json", str(j)], capsys)
    assert code == 0
    d = json.loads(j.read_text())["bench"]
    assert d["reference"] == "reg-first" and d["ratio"]["reg-first"] == 1.0
    assert set(d["median_ns"]) == {"parallel", "cls-first", "reg-first"} and d["rounds"] == 10


def test_bench_rejects_few_rounds_and_bad_reference(capsys):
    assert run(["bench", "--rounds", "5"], capsys)[0] == 2
    assert run(["bench", "--baseline-scheme", "serial"], capsys)[0] == 2


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "zcd", "params", "--backbone-profile", "faithful-r101"],
                       capture_output=True, text=True, check=False)
    assert r.returncode == 0 and "faithful-r101" in r.stdout
