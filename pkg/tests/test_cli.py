import csv
import hashlib
import json
import subprocess
import sys

import pytest

from dcrlab import __version__
from dcrlab.bitmaps import PermissionBitmaps
from dcrlab.campaign import CampaignConfig, ConfigError, ProfileConfig, run_campaign, summarize, trial_seeds
from dcrlab.cli import main
from dcrlab.program import container
from tests.conftest import asm_image


def sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def small_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("img") / "small.dcr"
    assert main(["gen", "--blocks", "800", "--seed", "5", "--out", str(path)]) == 0
    return path


# ------------------------------------------------------------ gen

def test_gen_is_deterministic(tmp_path, capsys):
    a, b, c = tmp_path / "a.dcr", tmp_path / "b.dcr", tmp_path / "c.dcr"
    assert run(capsys, "gen", "--blocks", "500", "--seed", "3", "--out", a)[0] == 0
    assert run(capsys, "--seed", "3", "gen", "--blocks", "500", "--out", b)[0] == 0
    assert run(capsys, "gen", "--blocks", "500", "--seed", "4", "--out", c)[0] == 0
    assert sha(a) == sha(b) != sha(c)


def test_gen_provenance(small_file):
    img, _, sec = container.load(small_file)
    prov = json.loads(sec[b"PROV"])
    assert prov["tool"] == "dcrlab" and prov["version"] == __version__
    assert prov["kind"] == "image"
    assert prov["config"]["block_count"] == 800 and prov["config"]["seed"] == 5
    assert len(img.blocks) == 800


def test_gen_infeasible_ratio(tmp_path, capsys):
    spec = tmp_path / "bad.spec"
    spec.write_text("block_count: 100\ndata_in_code_ratio: 1.5\n")
    code, _, err = run(capsys, "gen", "--spec", spec, "--out", tmp_path / "x.dcr")
    assert code == 3 and "error" in err
    assert not (tmp_path / "x.dcr").exists()


def test_gen_spec_syntax_error_has_line(tmp_path, capsys):
    spec = tmp_path / "bad.spec"
    spec.write_text("block_count: 100\nseed: 1\nblok_size: 3\n")
    code, _, err = run(capsys, "gen", "--spec", spec, "--out", tmp_path / "x.dcr")
    assert code == 3 and "line 3" in err


def test_gen_unknown_spec_name(tmp_path, capsys):
    assert run(capsys, "gen", "--spec", "no-such-spec", "--out", tmp_path / "x.dcr")[0] == 3


def test_bundled_spec_data_ratio(tmp_path, capsys):
    out = tmp_path / "x.dcr"
    code, stdout, _ = run(capsys, "gen", "--spec", "xul-like", "--blocks", "20000", "--out", out)
    assert code == 0
    assert json.loads(stdout)["data_in_code"] == pytest.approx(0.0162, abs=0.002)


# ------------------------------------------------------------ usage errors

@pytest.mark.parametrize("argv", [[], ["gen"], ["bogus"], ["gen", "--out", "x", "--blocks", "many"],
                                  ["randomize", "--image", "x", "--tier", "tier9", "--out", "y"]])
def test_usage_errors_exit_2(argv, capsys):
    assert main(argv) == 2


def test_version_and_help(capsys):
    assert main(["--version"]) == 0
    assert __version__ in capsys.readouterr().out
    assert main(["--help"]) == 0


def test_missing_and_garbage_inputs(tmp_path, capsys):
    assert run(capsys, "stats", "--image", tmp_path / "nope.dcr", "--out-dir", tmp_path / "o")[0] == 3
    junk = tmp_path / "junk.dcr"
    junk.write_bytes(b"not an image at all")
    assert run(capsys, "stats", "--image", junk, "--out-dir", tmp_path / "o")[0] == 3


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "dcrlab", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout


# ------------------------------------------------------------ randomize / profile

def test_randomize_writes_map_and_provenance(small_file, tmp_path, capsys):
    bm = tmp_path / "p.dcrb"
    assert run(capsys, "profile", "--image", small_file, "--out", bm)[0] == 0
    out = tmp_path / "r.dcr"
    assert run(capsys, "randomize", "--image", small_file, "--tier", "tier2", "--seed", "7",
               "--bitmaps", bm, "--out", out)[0] == 0
    img, rbm, sec = container.load(out)
    assert b"RAND" in sec and rbm is not None and len(rbm) == len(img.text)
    prov = json.loads(sec[b"PROV"])
    assert prov["config"]["randomization"]["tier"] == "tier2"
    assert prov["config"]["randomization"]["seed"] == 7
    assert prov["config"]["source"]["seed"] == 5
    out2 = tmp_path / "r2.dcr"
    run(capsys, "--seed", "7", "randomize", "--image", small_file, "--tier", "tier2", "--bitmaps", bm, "--out", out2)
    assert sha(out) == sha(out2)


@pytest.mark.parametrize("mode", ["static", "dynamic", "merged"])
def test_profile_modes(small_file, tmp_path, capsys, mode):
    out = tmp_path / f"{mode}.dcrb"
    code, stdout, _ = run(capsys, "profile", "--image", small_file, "--mode", mode, "--workload", "test", "--out", out)
    assert code == 0
    info = json.loads(stdout)
    assert info["version"] == __version__ and info["mode"] == mode
    bm = PermissionBitmaps.load(out)
    assert bm.code.any()


def test_profile_workload_file(small_file, tmp_path, capsys):
    img, _, _ = container.load(small_file)
    f = img.entry_points[0]
    wl = tmp_path / "w.json"
    wl.write_text(json.dumps([[img.entry_address(f), [1, 2, 3, 4][:img.functions[f].param_count]]]))
    assert run(capsys, "profile", "--image", small_file, "--mode", "dynamic", "--workload", wl,
               "--out", tmp_path / "w.dcrb")[0] == 0
    wl.write_text(json.dumps([["x"]]))
    assert run(capsys, "profile", "--image", small_file, "--mode", "dynamic", "--workload", wl,
               "--out", tmp_path / "w.dcrb")[0] == 3


# ------------------------------------------------------------ stats

def test_stats_empty_image(tmp_path, capsys):
    img, _ = asm_image("f: RET\n")
    path = tmp_path / "empty.dcr"
    container.save(path, img)
    assert run(capsys, "stats", "--image", path, "--out-dir", tmp_path / "o")[0] == 0
    for name in ("fig3_candidates.csv", "table1_fitchance.csv", "fig8_curve.csv", "appendixA_cdf.csv",
                 "table7_buckets.csv"):
        rows = list(csv.reader(open(tmp_path / "o" / name)))
        assert len(rows) == 1
    meta = json.loads((tmp_path / "o" / "stats.json").read_text())
    assert meta["version"] == __version__


def test_stats_repeatable(small_file, tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "--seed", "2", "stats", "--image", small_file, "--out-dir", tmp_path / d,
                   "--samples", "1000")[0] == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_stats_fit_chance_row_on_large_image(xul_image, tmp_path, capsys):
    from dcrlab.program.generator import bundled_spec
    path = tmp_path / "xul.dcr"
    prov = json.dumps({"tool": "dcrlab", "version": __version__, "kind": "image",
                       "config": bundled_spec("xul-like").to_dict()}).encode()
    container.save(path, xul_image, extra=[(b"PROV", prov)])
    assert run(capsys, "stats", "--image", path, "--out-dir", tmp_path / "o", "--samples", "500")[0] == 0
    rows = {int(r[0]): r for r in list(csv.reader(open(tmp_path / "o" / "table1_fitchance.csv")))[1:]}
    assert float(rows[6][1]) == pytest.approx(0.74, abs=0.03)
    assert float(rows[6][2]) == pytest.approx(0.74, abs=0.03)


# ------------------------------------------------------------ config / campaign

def test_config_dump_round_trips(capsys):
    code, out, _ = run(capsys, "config", "--dump")
    assert code == 0
    camp, gen = out.split("# generator spec (defaults)\n")
    assert CampaignConfig.from_yaml(camp) == CampaignConfig()
    assert "block_count" in gen


def test_campaign_zero_trials(small_file, tmp_path, capsys, caplog):
    out = tmp_path / "c.json"
    code, _, _ = run(capsys, "campaign", "--image", small_file, "--trials", "0", "--out", out)
    assert code == 0
    res = json.loads(out.read_text())
    assert res["reports"] == [] and res["summary"]["trials"] == 0
    assert res["warnings"]
    assert any("no trials" in r.getMessage() and r.levelname == "WARNING" for r in caplog.records)


def test_campaign_summary_and_provenance(small_file, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("policy: dcr-only\ntier: tier1\nattack: attack1\ntrials: 12\n")
    out = tmp_path / "c.json"
    code, stdout, _ = run(capsys, "campaign", "--image", small_file, "--config", cfg, "--out", out, "--seed", "4")
    assert code == 0
    res = json.loads(out.read_text())
    assert res["version"] == __version__ and res["config"]["seed"] == 4 and res["config"]["trials"] == 12
    s = res["summary"]
    assert s == json.loads(stdout)
    assert s["trials"] == 12 and s["successes"] >= 11
    lo, hi = s["ci"]
    assert lo <= s["success_rate"] <= hi
    assert [r["trial"] for r in res["reports"]] == list(range(12))


def test_campaign_bgdx_prints_prediction(small_file, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("policy: bgdx\ntrials: 20\nrandomizations: 2\nreference_trials: 5\n")
    code, stdout, _ = run(capsys, "campaign", "--image", small_file, "--config", cfg)
    assert code == 0
    s = json.loads(stdout)
    assert 0 < s["xom_probe_ratio"] <= 1
    assert "predicted_success" in s and "comparison" in s


def test_campaign_bad_config(small_file, tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    for text in ("policy: nope\n", "trials: -1\n", "budget: {probe_length: 1}\n", "colour: red\n", "- a\n- b\n",
                 "profile: {source: file}\n", "policy: [\n"):
        cfg.write_text(text)
        assert run(capsys, "campaign", "--image", small_file, "--config", cfg)[0] == 3, text


def test_campaign_example_config_parses():
    from importlib.resources import files
    cfg = CampaignConfig.from_yaml(files("dcrlab").joinpath("data/campaign-example.yaml").read_text())
    assert cfg.policy == "bgdx" and cfg.randomizations == 10


# ------------------------------------------------------------ campaign library

def test_worker_count_does_not_change_results(small_image):
    cfg = CampaignConfig(policy="dcr-only", trials=9, seed=3)
    a = run_campaign(small_image, cfg, workers=1)
    b = run_campaign(small_image, cfg, workers=3)
    assert [r.to_json() for r in a.reports] == [r.to_json() for r in b.reports]
    assert a.summary == b.summary


def test_randomization_slots(small_image):
    cfg = CampaignConfig(policy="dcr-only", trials=6, randomizations=2, seed=1)
    a = run_campaign(small_image, cfg)
    b = run_campaign(small_image, CampaignConfig(policy="dcr-only", trials=6, randomizations=2, seed=1), workers=2)
    assert [r.to_json() for r in a.reports] == [r.to_json() for r in b.reports]


def test_trial_seeds_are_distinct():
    seeds = {trial_seeds(0, i) for i in range(1000)}
    assert len(seeds) == 1000
    assert trial_seeds(1, 0) != trial_seeds(0, 0)


def test_config_errors():
    with pytest.raises(ConfigError):
        CampaignConfig.from_dict({"workers": 0})
    with pytest.raises(ConfigError):
        CampaignConfig.from_dict({"profile": {"source": "static", "oops": 1}})
    with pytest.raises(ConfigError):
        CampaignConfig.from_dict({"profile": "static"})
    with pytest.raises(ConfigError):
        ProfileConfig(confidence="wild").check()
    cfg = CampaignConfig.from_dict({"budget": {"max_probes": 50}})
    assert cfg.attack_budget().max_probes == 50 and cfg.attack_budget().probe_length == 6


def test_summary_of_nothing():
    s = summarize([])
    assert s["trials"] == 0 and s["success_rate"] is None and s["ci"] == [None, None]
    json.dumps(s)
