import json

import numpy as np
import pytest

from scmoe import config as cfgmod
from scmoe import experiment as ex
from scmoe.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main
from scmoe.config import ConfigError, RunConfig

SMALL = {
    "model": {"input_dim": 6, "vocab_size": 8, "d_model": 8, "d_ff": 12, "heads": 2, "conv_kernel": 3,
              "m": 1, "h": 1, "k": 1, "g": 1},
    "data": {"spec": {"vocab_per_language": 3, "feature_dim": 6, "min_tokens": 3, "max_tokens": 6},
             "n_train": 12, "n_dev": 4, "n_test": 5, "seed": 3},
    "optim": {"steps": 6, "batch_size": 4, "warmup": 5},
    "train": {"eval_every": 3, "checkpoint_every": 3},
    "decode": {"beam": 3},
}


@pytest.fixture
def workspace(tmp_path):
    conf = json.loads(json.dumps(SMALL))
    conf["data"]["corpus_dir"] = str(tmp_path / "corpus")
    conf["output_dir"] = str(tmp_path / "runs")
    path = tmp_path / "config.json"
    path.write_text(json.dumps(conf))
    return tmp_path, str(path)


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, out


def read_metrics(run_dir):
    return [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]


# ---------------------------------------------------------------- config

def test_defaults_validate():
    cfg = cfgmod.load()
    assert cfg.model.d_model == 64 and (cfg.model.m, cfg.model.h, cfg.model.k, cfg.model.g) == (2, 2, 1, 1)
    assert (cfg.weights.lam, cfg.weights.alpha) == (0.3, 0.3)
    assert (cfg.decode_weights.lam, cfg.decode_weights.alpha) == (0.3, 0.6)


@pytest.mark.parametrize("data", [
    {"modle": {}},
    {"model": {"d_modle": 3}},
    {"data": {"spec": {"vocab": 3}}},
])
def test_unknown_keys_rejected(data):
    with pytest.raises(ConfigError, match="unknown key"):
        cfgmod.from_dict(data)


@pytest.mark.parametrize("override", [
    "model.d_model=\"x\"", "model.heads=3", "data.switch_prob=2", "decode.beam=0", "model.input_dim=7",
    "model.router_sharing=R9", "nokey",
])
def test_bad_values_rejected(override):
    with pytest.raises(ConfigError):
        cfgmod.load(None, [override])


def test_dotted_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"optim": {"steps": 10}}))
    cfg = cfgmod.load(p, ["optim.steps=20", "model.router_sharing=R2", "train.chunk_policy=[4,2]"])
    assert cfg.optim.steps == 20 and cfg.optim.batch_size == 16
    assert cfg.model.router_sharing == "R2" and cfg.train.chunk_policy == [4, 2]


def test_digest_tracks_content():
    a, b = RunConfig(), RunConfig()
    assert a.digest() == b.digest()
    b.seed = 1
    assert a.digest() != b.digest()


# ---------------------------------------------------------------- gen-data

def test_gen_data_deterministic_and_counts(workspace, capsys):
    root, conf = workspace
    code, out = run(capsys, "gen-data", "--config", conf)
    assert code == EXIT_OK
    first = json.loads(out)
    assert first["counts"] == {"train": 12, "dev": 4, "test": 5}
    code, out = run(capsys, "gen-data", "--config", conf)
    assert json.loads(out)["sha256"] == first["sha256"]


def test_gen_data_switch_rate_summary(tmp_path, capsys):
    code, out = run(capsys, "gen-data", "--set", f"data.corpus_dir={tmp_path}", "--set", "data.n_train=1300",
                    "--set", "data.n_dev=0", "--set", "data.n_test=0", "--set", "data.switch_prob=0.3")
    assert code == EXIT_OK
    assert abs(json.loads(out)["switch_rate"]["train"] - 0.3) < 0.02


def test_gen_data_unwritable(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code, _ = run(capsys, "gen-data", "--set", f"data.corpus_dir={blocker / 'x'}")
    assert code == EXIT_DATA


# ---------------------------------------------------------------- train

def test_train_logs_every_step_with_all_components(workspace, capsys):
    root, conf = workspace
    run(capsys, "gen-data", "--config", conf)
    code, out = run(capsys, "train", "--config", conf, "--run-dir", str(root / "a"))
    assert code == EXIT_OK
    recs = read_metrics(root / "a")
    assert [r["step"] for r in recs] == list(range(1, 7))
    for r in recs:
        for key in ("total", "asr", "lid", "asr_ctc", "asr_ce_l2r", "asr_ce_r2l", "lid_ctc", "lid_ce_l2r",
                    "lid_ce_r2l", "routing", "lr", "grad_norm", "chunk"):
            assert key in r
        assert len(r["lid_ctc"]) == 1 and len(r["lid_ce_l2r"]) == 1
        assert len(r["routing"]) == 2 and all(abs(sum(s) - 1) < 1e-12 for s in r["routing"])
    assert "dev_loss" in recs[2] and "dev_loss" in recs[5]
    for name in ("final.ckpt", "best.ckpt", "step-000003.ckpt", "step-000006.ckpt", "config.json"):
        assert (root / "a" / name).exists()


def test_default_run_dir_is_hash_plus_time(workspace, capsys):
    root, conf = workspace
    run(capsys, "gen-data", "--config", conf)
    code, out = run(capsys, "train", "--config", conf, "--set", "optim.steps=1")
    run_dir = json.loads(out)["run_dir"]
    cfg = cfgmod.load(conf, ["optim.steps=1"])
    assert code == EXIT_OK and run_dir.split("/")[-1].startswith(cfg.digest() + "-")


def test_resume_matches_uninterrupted_curve(workspace, capsys):
    root, conf = workspace
    run(capsys, "gen-data", "--config", conf)
    assert run(capsys, "train", "--config", conf, "--run-dir", str(root / "full"))[0] == EXIT_OK
    run(capsys, "train", "--config", conf, "--set", "optim.steps=3", "--run-dir", str(root / "half"))
    code, _ = run(capsys, "train", "--config", conf, "--resume", str(root / "half" / "final.ckpt"),
                  "--run-dir", str(root / "rest"))
    assert code == EXIT_OK
    full = read_metrics(root / "full")
    resumed = read_metrics(root / "half") + read_metrics(root / "rest")
    assert [r["total"] for r in resumed] == [r["total"] for r in full]


def test_baseline_and_sc_train_on_same_corpus(workspace, capsys):
    root, conf = workspace
    run(capsys, "gen-data", "--config", conf)
    base = ["--set", "model.m=2", "--set", "model.h=0", "--set", "model.k=2", "--set", "model.g=0"]
    code, _ = run(capsys, "train", "--config", conf, *base, "--set", "optim.steps=2", "--run-dir", str(root / "b"))
    assert code == EXIT_OK
    recs = read_metrics(root / "b")
    assert all(r["lid"] == 0.0 and r["total"] == r["asr"] for r in recs)
    code, _ = run(capsys, "train", "--config", conf, "--set", "optim.steps=2", "--run-dir", str(root / "s"))
    assert code == EXIT_OK


def test_init_from_baseline_checkpoint(workspace, capsys):
    from scmoe import checkpoint as ckpt

    root, conf = workspace
    run(capsys, "gen-data", "--config", conf)
    base = ["--set", "model.m=2", "--set", "model.h=0", "--set", "model.k=2", "--set", "model.g=0"]
    run(capsys, "train", "--config", conf, *base, "--set", "optim.steps=2", "--run-dir", str(root / "b"))
    base_arrays = ckpt.load(root / "b" / "final.ckpt")[1]
    state = ex.new_state(cfgmod.load(conf).model, cfgmod.load(conf).optim, 0)
    filled = ex.init_from_checkpoint(state.model, root / "b" / "final.ckpt")
    assert any(n.startswith("encoder.standard.0.") for n in filled)
    assert not any(".switch." in n for n in filled)
    params = dict(state.model.named_parameters())
    np.testing.assert_array_equal(params["ctc.weight"].data, base_arrays["ctc.weight"])
    code, _ = run(capsys, "train", "--config", conf, "--set", "optim.steps=1",
                  "--set", f"train.init_from={root / 'b' / 'final.ckpt'}", "--run-dir", str(root / "s"))
    assert code == EXIT_OK
    code, _ = run(capsys, "train", "--config", conf, "--set", f"train.init_from={root / 'nope.ckpt'}",
                  "--run-dir", str(root / "t"))
    assert code == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_exit_codes(workspace, capsys):
    root, conf = workspace
    assert run(capsys, "train", "--config", conf)[0] == EXIT_DATA  # no corpus yet
    run(capsys, "gen-data", "--config", conf)
    assert run(capsys, "train", "--config", str(root / "missing.json"))[0] == EXIT_CONFIG
    assert run(capsys, "train", "--config", conf, "--set", "model.bogus=1")[0] == EXIT_CONFIG
    state = ex.new_state(cfgmod.load(conf).model, cfgmod.load(conf).optim, 0)
    state.model.ctc.weight.data[...] = np.nan
    ex.save_state(state, root / "nan.ckpt")
    code, _ = run(capsys, "train", "--config", conf, "--resume", str(root / "nan.ckpt"), "--run-dir", str(root / "n"))
    assert code == EXIT_NUMERIC


def test_resume_rejects_other_model_config(workspace, capsys):
    root, conf = workspace
    run(capsys, "gen-data", "--config", conf)
    run(capsys, "train", "--config", conf, "--set", "optim.steps=1", "--run-dir", str(root / "a"))
    code, _ = run(capsys, "train", "--config", conf, "--set", "model.d_ff=16",
                  "--resume", str(root / "a" / "final.ckpt"), "--run-dir", str(root / "b"))
    assert code == EXIT_CONFIG


# ---------------------------------------------------------------- eval / decode / stream

@pytest.fixture
def trained(workspace, capsys):
    root, conf = workspace
    run(capsys, "gen-data", "--config", conf)
    run(capsys, "train", "--config", conf, "--run-dir", str(root / "a"))
    return root, conf, str(root / "a" / "final.ckpt")


def test_eval_full_and_streaming_from_one_checkpoint(trained, capsys):
    root, conf, ck = trained
    code, full = run(capsys, "eval", "--config", conf, "--checkpoint", ck)
    assert code == EXIT_OK
    code, again = run(capsys, "eval", "--config", conf, "--checkpoint", ck)
    assert again == full  # byte-identical rerun
    code, streamed = run(capsys, "eval", "--config", conf, "--checkpoint", ck, "--chunk", "16", "--left-chunks", "8")
    assert code == EXIT_OK
    a, b = json.loads(full), json.loads(streamed)
    assert a["chunk"] == [-1, -1] and b["chunk"] == [16, 8]
    for report in (a, b):
        for key in ("man", "eng", "mixed", "lid_frame_accuracy", "routing", "hypotheses"):
            assert key in report
        assert report["utterances"] == 5


def test_stream_matches_eval_and_first_partial_at_chunk_one(trained, capsys):
    root, conf, ck = trained
    code, out = run(capsys, "eval", "--config", conf, "--checkpoint", ck, "--chunk", "4", "--left-chunks", "2")
    hyps = json.loads(out)["hypotheses"]
    for uid in ("test-00000", "test-00003"):
        code, out = run(capsys, "stream", "--config", conf, "--checkpoint", ck, "--utt", uid,
                        "--chunk", "4", "--left-chunks", "2")
        assert code == EXIT_OK
        lines = [json.loads(x) for x in out.splitlines()]
        assert lines[0]["chunk"] == 1 and lines[0]["end_frame"] == 4
        assert lines[-1]["final"] == hyps[uid]


def test_stream_partials_survive_truncation(trained, capsys):
    from scmoe.data import read_corpus
    from scmoe.encoder import ChunkSpec
    from scmoe.model import streaming_decode

    root, conf, ck = trained
    model, _ = ex.load_model(ck)
    utt = read_corpus(root / "corpus").test[1]
    spec = ChunkSpec(4, 2)
    full, _ = streaming_decode(model, utt.features, spec, beam=3)
    for c in range(1, len(full)):
        cut, _ = streaming_decode(model, utt.features[: 4 * c], spec, beam=3)
        assert cut == full[:c]


def test_decode_and_inspect_routing(trained, capsys):
    root, conf, ck = trained
    code, out = run(capsys, "decode", "--config", conf, "--checkpoint", ck, "--utt", "test-00002")
    assert code == EXIT_OK
    rec = json.loads(out)
    assert rec["id"] == "test-00002" and set(rec) >= {"hyp", "ref", "fused_score"}
    code, out = run(capsys, "inspect-routing", "--config", conf, "--checkpoint", ck)
    assert code == EXIT_OK
    assert json.loads(out)["slots"] == 2


def test_eval_errors(trained, capsys):
    root, conf, ck = trained
    assert run(capsys, "eval", "--config", conf)[0] == EXIT_CONFIG
    assert run(capsys, "eval", "--config", conf, "--checkpoint", str(root / "nope.ckpt"))[0] == EXIT_DATA
    assert run(capsys, "stream", "--config", conf, "--checkpoint", ck, "--utt", "test-99999")[0] == EXIT_DATA
    assert run(capsys, "eval", "--config", conf, "--checkpoint", ck, "--chunk", "0")[0] == EXIT_CONFIG
    other = root / "other.json"
    data = json.loads(open(conf).read())
    data["model"]["input_dim"] = 8
    data["data"]["spec"]["feature_dim"] = 8
    other.write_text(json.dumps(data))
    assert run(capsys, "eval", "--config", str(other), "--checkpoint", ck)[0] == EXIT_CONFIG
