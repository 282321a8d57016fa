import csv
import json
import math
import statistics

import numpy as np
import pytest

from conftest import stage_config, strip_wall
from mpclab import pipeline
from mpclab.checkpoint import Checkpoint
from mpclab.errors import ConfigError
from mpclab.features import load_features, read_manifest
from mpclab.model import init_params
from mpclab.schedules import LayerwiseConfig, layer_multiplier


def run_cfg(out, seed=0, plots=False):
    return f"[run]\nseed = {seed}\nout = {out}\nplots = {str(plots).lower()}\n"


def pretrain(corpus, out, body="", seed=0, epochs=2, init=None):
    text = (run_cfg(out, seed) + f"[data]\nmanifest = {corpus['pre']}\n"
            f"[train]\nepochs = {epochs}\nbatch_size = 4\n" + body)
    return pipeline.cmd_pretrain(stage_config("pretrain", corpus["root"], text), init)


def finetune(corpus, out, body="", epochs=2, init=None, seed=0, transfer=""):
    text = (run_cfg(out, seed) + f"[data]\nmanifest = {corpus['ft']}\ndev_manifest = {corpus['dev']}\n"
            f"[train]\nepochs = {epochs}\nbatch_size = 2\n[transfer]\n{transfer}\n" + body)
    return pipeline.cmd_finetune(stage_config("finetune", corpus["root"], text), init)


@pytest.fixture(scope="module")
def pretrained(corpus):
    return pretrain(corpus, "shared_pre", epochs=2).checkpoints[-1]


# synthesis ------------------------------------------------------------------------------

def test_synth_writes_counted_corpus(corpus):
    m = read_manifest(corpus["ft"], vocab_size=4)
    assert len(m) == 8 and m.labeled
    lengths = [load_features(e.feature_path).frames.shape[0] for e in m]
    assert all(28 <= t <= 40 for t in lengths)
    assert not read_manifest(corpus["pre"]).labeled


def test_synth_deterministic(tmp_path):
    body = run_cfg("a", seed=3) + "[synth]\nn = 3\nmin_frames = 16\nmax_frames = 24\nfeat_dim = 4\nlabeled = true\n"
    a = pipeline.cmd_synth(stage_config("synth", tmp_path, body))
    b = pipeline.cmd_synth(stage_config("synth", tmp_path, body.replace("out = a", "out = b")))
    files_a = sorted(p.name for p in a.out_dir.glob("*.mpcf"))
    assert files_a == sorted(p.name for p in b.out_dir.glob("*.mpcf")) and len(files_a) == 3
    for name in files_a:
        assert (a.out_dir / name).read_bytes() == (b.out_dir / name).read_bytes()
    assert (a.out_dir / "manifest.tsv").read_text() == (b.out_dir / "manifest.tsv").read_text()


# pre-training -----------------------------------------------------------------------------

def test_pretrain_step_count_and_outputs(corpus, tmp_path):
    res = pretrain(corpus, tmp_path / "p", epochs=3)
    assert len(res.metrics) == 3 * math.ceil(8 / 4)
    assert [m.step for m in res.metrics] == list(range(1, 7))
    assert [p.name for p in res.checkpoints] == ["ckpt_epoch001.mpcc", "ckpt_epoch002.mpcc", "ckpt_epoch003.mpcc"]
    assert (res.out_dir / "latest.mpcc").read_bytes() == res.checkpoints[-1].read_bytes()
    logged = pipeline.read_metrics(res.out_dir / "metrics.jsonl")
    assert strip_wall(logged) == strip_wall([m.__dict__ for m in res.metrics])


@pytest.mark.parametrize("kind", ["mpc", "apc"])
def test_pretraining_reduces_loss(tmp_path_factory, kind):
    root = tmp_path_factory.mktemp("bigger")
    synth = run_cfg("pre", seed=21) + "[synth]\nn = 32\nmin_frames = 48\nmax_frames = 80\nfeat_dim = 6\n"
    manifest = pipeline.cmd_synth(stage_config("synth", root, synth)).extra["manifest"]
    ratios = []
    for seed in range(3):
        text = (run_cfg(f"{kind}{seed}", seed) + f"[data]\nmanifest = {manifest}\n[objective]\nkind = {kind}\n"
                "[train]\nepochs = 12\nbatch_size = 4\n[schedule]\nk = 0.02\nwarmup_n = 20\n")
        totals = [m.total for m in pipeline.cmd_pretrain(stage_config("pretrain", root, text)).metrics]
        ratios.append(statistics.mean(totals[-8:]) / statistics.mean(totals[:8]))
    assert statistics.median(ratios) < 0.9, ratios


def test_unified_extremes_match_single_objectives(corpus, tmp_path):
    def run(name, body):
        res = pretrain(corpus, tmp_path / name, "[objective]\n" + body, epochs=2)
        return strip_wall([m.__dict__ for m in res.metrics]), Checkpoint.load(res.checkpoints[-1]).params

    for p, kind in [(0.0, "mpc"), (1.0, "apc")]:
        m_u, p_u = run(f"u{p}", f"kind = unified\np = {p}\n")
        m_s, p_s = run(kind, f"kind = {kind}\n")
        assert m_u == m_s
        assert all(p_u[k].tobytes() == p_s[k].tobytes() for k in p_s)
        assert {r["branch"] for r in m_u} == {kind.upper()}


def test_unified_half_takes_both_branches(corpus, tmp_path):
    res = pretrain(corpus, tmp_path / "u", "[objective]\nkind = unified\np = 0.5\n", epochs=6)
    branches = [m.branch for m in res.metrics]
    assert set(branches) == {"MPC", "APC"}
    for m in res.metrics:
        assert (m.l_apc == 0.0) == (m.branch == "MPC")


def test_pretraining_is_deterministic(corpus, tmp_path):
    a = pretrain(corpus, tmp_path / "a", "[objective]\nkind = unified\n")
    b = pretrain(corpus, tmp_path / "b", "[objective]\nkind = unified\n")
    for x, y in zip(a.checkpoints, b.checkpoints):
        assert x.read_bytes() == y.read_bytes()
    assert strip_wall([m.__dict__ for m in a.metrics]) == strip_wall([m.__dict__ for m in b.metrics])


def test_pretraining_resume_matches_uninterrupted(corpus, tmp_path):
    body = "[objective]\nkind = unified\n"
    full = pretrain(corpus, tmp_path / "full", body, epochs=3)
    part = pretrain(corpus, tmp_path / "part", body, epochs=1)
    rest = pretrain(corpus, tmp_path / "part", body, epochs=3, init=part.checkpoints[-1])
    assert rest.checkpoints[-1].read_bytes() == full.checkpoints[-1].read_bytes()
    assert (strip_wall(pipeline.read_metrics(tmp_path / "part" / "metrics.jsonl"))
            == strip_wall(pipeline.read_metrics(tmp_path / "full" / "metrics.jsonl")))


def test_pretraining_never_reads_transcripts(corpus, tmp_path):
    labeled = corpus["ft"]
    stripped = tmp_path / "unlabeled.tsv"
    stripped.write_text("".join(f"{e.feature_path}\n" for e in read_manifest(labeled)))

    def run(manifest, out):
        text = run_cfg(out) + f"[data]\nmanifest = {manifest}\n[train]\nepochs = 1\nbatch_size = 4\n"
        res = pipeline.cmd_pretrain(stage_config("pretrain", tmp_path, text))
        return Checkpoint.load(res.checkpoints[-1]).params, strip_wall([m.__dict__ for m in res.metrics])

    (pa, ma), (pb, mb) = run(labeled, "with"), run(stripped, "without")
    assert ma == mb
    assert all(pa[k].tobytes() == pb[k].tobytes() for k in pa)


def test_pretrain_rejects_model_mismatch_on_resume(corpus, tmp_path, pretrained):
    text = run_cfg(tmp_path / "x") + f"[data]\nmanifest = {corpus['pre']}\n"
    cfg = stage_config("pretrain", corpus["root"], text, model=MODEL_WIDER)
    with pytest.raises(ConfigError):
        pipeline.cmd_pretrain(cfg, pretrained)


MODEL_WIDER = """
[model]
enc_layers = 2
dec_layers = 1
d_model = 12
d_ff = 16
heads = 2
feat_dim = 6
vocab_size = 4
prenet_channels = 4
"""


# target adaptation ------------------------------------------------------------------------

def adapt(corpus, out, init, epochs):
    text = (run_cfg(out) + f"[data]\nmanifest = {corpus['pre']}\n[train]\nbatch_size = 4\n"
            f"[transfer]\ntarget_adapt_epochs = {epochs}\n")
    return pipeline.cmd_adapt(stage_config("adapt", corpus["root"], text), init)


def test_adapt_zero_epochs_is_identity(corpus, tmp_path, pretrained):
    res = adapt(corpus, tmp_path / "a", pretrained, 0)
    src, out = Checkpoint.load(pretrained), Checkpoint.load(res.checkpoints[-1])
    assert all(out.params[k].tobytes() == src.params[k].tobytes() for k in src.params)
    assert out.parent_digest == src.digest() and out.stage == "adapt"
    assert res.metrics == []


def test_adapt_continues_training_state(corpus, tmp_path):
    # adaptation on the source corpus is exactly one more MPC pre-training epoch
    two = pretrain(corpus, tmp_path / "two", epochs=2)
    three = pretrain(corpus, tmp_path / "three", epochs=3)
    res = adapt(corpus, tmp_path / "ad", two.checkpoints[-1], 1)
    a, b = Checkpoint.load(res.checkpoints[-1]), Checkpoint.load(three.checkpoints[-1])
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in b.params)
    assert (a.epoch, a.step) == (b.epoch, b.step)
    assert [m.step for m in res.metrics] == [5, 6]


def test_adapt_needs_init(corpus, tmp_path):
    with pytest.raises(ConfigError):
        adapt(corpus, tmp_path / "a", None, 1)


# fine-tuning --------------------------------------------------------------------------------

def test_finetune_without_mpc_has_zero_mpc_loss(corpus, tmp_path):
    res = finetune(corpus, tmp_path / "f")
    assert res.metrics and all(m.l_mpc == 0.0 and m.gamma_mpc == 0.0 for m in res.metrics)
    assert all(m.alpha_attn == 0.7 and m.beta_ctc == 0.3 for m in res.metrics)
    assert [r["epoch"] for r in res.extra["dev"]] == [0, 1, 2]
    for m in res.metrics:
        assert m.total == pytest.approx(0.7 * m.l_attn + 0.3 * m.l_ctc, abs=1e-12)


def test_layerwise_learning_rates(corpus, tmp_path, pretrained):
    res = finetune(corpus, tmp_path / "lw", init=pretrained, transfer="layerwise = true",
                   body="[schedule]\nlam = 0.9\ntheta = 1.5\n")
    cfg = LayerwiseConfig(0.9, 1.5)
    for m in res.metrics:
        for l in (1, 2):
            assert abs(m.group_lr[f"encoder.{l}"] - m.lr * 0.9 ** abs(l - 1.5)) <= 1e-12 * m.lr
            assert m.group_lr[f"encoder.{l}"] == m.lr * layer_multiplier(cfg, l, 2)
        assert m.group_lr["prenet"] == m.lr and m.group_lr["decoder"] == m.lr
        assert m.group_lr["ctc_head"] == m.lr


def test_layerwise_off_uses_one_rate(corpus, tmp_path):
    res = finetune(corpus, tmp_path / "flat", epochs=1)
    for m in res.metrics:
        assert set(m.group_lr.values()) == {m.lr}


def test_optimizer_applies_per_parameter_rates(corpus):
    names = list(init_params(corpus_model(), 0))
    lrs = pipeline.per_param_lr(0.5, names, corpus_model(), LayerwiseConfig(0.95, 5.5))
    assert lrs["encoder.layers.1.attn.wq"] == 0.5 * 0.95 ** 4.5
    assert lrs["encoder.final_ln.gain"] == lrs["encoder.layers.2.ffn.w1"] == 0.5 * 0.95 ** 3.5
    assert lrs["prenet.conv1.weight"] == lrs["decoder.embed"] == 0.5


def corpus_model():
    return stage_config("finetune", ".", "").model.model_config()


def test_multitask_needs_init(corpus, tmp_path):
    with pytest.raises(ConfigError):
        finetune(corpus, tmp_path / "m", transfer="multitask_mpc = true")


def test_multitask_gamma_follows_schedule(corpus, tmp_path, pretrained):
    res = finetune(corpus, tmp_path / "mt", epochs=5, init=pretrained, transfer="multitask_mpc = true",
                   body="[schedule]\ngamma0 = 0.2\nhalve_every = 2\n")
    by_epoch = {}
    for m in res.metrics:
        by_epoch.setdefault(m.epoch, set()).add(m.gamma_mpc)
    assert by_epoch == {0: {0.2}, 1: {0.2}, 2: {0.1}, 3: {0.1}, 4: {0.05}}
    assert any(m.l_mpc > 0 for m in res.metrics)
    for m in res.metrics:
        assert m.total == pytest.approx(0.7 * m.l_attn + 0.3 * m.l_ctc + m.gamma_mpc * m.l_mpc, abs=1e-12)


def test_mpc_head_kept_only_for_multitask(corpus, tmp_path, pretrained):
    src = Checkpoint.load(pretrained)
    fresh = init_params(src.model_config, 0)
    plain = Checkpoint.load(finetune(corpus, tmp_path / "p", epochs=1, init=pretrained).checkpoints[-1])
    assert plain.params["mpc_head.weight"].tobytes() == fresh["mpc_head.weight"].data.tobytes()
    assert plain.parent_digest == src.digest()
    multi = finetune(corpus, tmp_path / "m", epochs=0, init=pretrained, transfer="multitask_mpc = true")
    assert multi.checkpoints == []
    params = pipeline.transfer_params(src.model_config, 0, src, keep_mpc_head=True)
    assert params["mpc_head.weight"].data.tobytes() == src.params["mpc_head.weight"].tobytes()
    assert params["encoder.layers.2.ffn.w2"].data.tobytes() == src.params["encoder.layers.2.ffn.w2"].tobytes()
    assert params["decoder.out.weight"].data.tobytes() == fresh["decoder.out.weight"].data.tobytes()


def test_finetune_resume_matches_uninterrupted(corpus, tmp_path, pretrained):
    tr = "layerwise = true\nmultitask_mpc = true"
    full = finetune(corpus, tmp_path / "full", epochs=3, init=pretrained, transfer=tr)
    part = finetune(corpus, tmp_path / "part", epochs=1, init=pretrained, transfer=tr)
    rest = finetune(corpus, tmp_path / "part", epochs=3, init=part.checkpoints[-1], transfer=tr)
    assert rest.checkpoints[-1].read_bytes() == full.checkpoints[-1].read_bytes()
    assert (strip_wall(pipeline.read_metrics(tmp_path / "part" / "metrics.jsonl"))
            == strip_wall(pipeline.read_metrics(tmp_path / "full" / "metrics.jsonl")))


def test_finetune_is_deterministic(corpus, tmp_path, pretrained):
    a = finetune(corpus, tmp_path / "a", init=pretrained, transfer="multitask_mpc = true")
    b = finetune(corpus, tmp_path / "b", init=pretrained, transfer="multitask_mpc = true")
    assert a.checkpoints[-1].read_bytes() == b.checkpoints[-1].read_bytes()


def test_default_dev_split_is_hash_based():
    ids = [f"utt{i:05d}" for i in range(400)]
    dev = [u for u in ids if pipeline.is_dev(u)]
    assert 20 <= len(dev) <= 60
    assert dev == [u for u in ids if pipeline.is_dev(u)]


# probing ------------------------------------------------------------------------------------

def probe(corpus, out, init, epochs):
    text = (run_cfg(out) + f"[data]\nmanifest = {corpus['ft']}\ndev_manifest = {corpus['dev']}\n"
            f"[probe]\nepochs = {epochs}\n")
    return pipeline.cmd_probe(stage_config("probe", corpus["root"], text), init)


def test_probe_rows_and_csv(corpus, tmp_path, pretrained):
    res = probe(corpus, tmp_path / "pr", pretrained, 1)
    with open(res.out_dir / "probe.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["layer", "dev_loss", "dev_cer"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2]
    assert all(math.isfinite(float(r[1])) and 0 <= float(r[2]) for r in rows[1:])


def test_probe_keeps_encoder_frozen(corpus, tmp_path, pretrained):
    res = probe(corpus, tmp_path / "pr", pretrained, 1)
    src = Checkpoint.load(pretrained)
    for name, t in res.extra["frozen"].items():
        if name.startswith(("prenet.", "encoder.")):
            assert t.data.tobytes() == src.params[name].tobytes(), name


def test_untrained_probe_at_full_depth_equals_finetune_start(corpus, tmp_path, pretrained):
    rows = probe(corpus, tmp_path / "pr", pretrained, 0).extra["rows"]
    start = finetune(corpus, tmp_path / "ft", epochs=0, init=pretrained).extra["dev"][0]
    assert rows[-1]["dev_loss"] == pytest.approx(start["dev_loss"], rel=0, abs=1e-12)
    assert rows[-1]["dev_cer"] == start["dev_cer"]


def test_probe_needs_init(corpus, tmp_path):
    with pytest.raises(ConfigError):
        probe(corpus, tmp_path / "pr", None, 1)


# averaging ------------------------------------------------------------------------------------

def average(corpus, out, paths, k, dev=True):
    text = run_cfg(out) + f"[average]\nk = {k}\n"
    if dev:
        text += f"[data]\ndev_manifest = {corpus['dev']}\n"
    return pipeline.cmd_average(stage_config("average", corpus["root"], text), paths)


def test_average_of_identical_checkpoints_is_identity(corpus, tmp_path, pretrained):
    res = average(corpus, tmp_path / "av", [pretrained] * 3, 3)
    out, src = Checkpoint.load(res.checkpoints[0]), Checkpoint.load(pretrained)
    assert all(out.params[k].tobytes() == src.params[k].tobytes() for k in src.params)
    assert out.adam is None and out.rng_state == {}


def test_average_of_two_is_elementwise_mean(corpus, tmp_path):
    res = pretrain(corpus, tmp_path / "p", epochs=2)
    out = Checkpoint.load(average(corpus, tmp_path / "av", res.checkpoints, 2, dev=False).checkpoints[0])
    a, b = (Checkpoint.load(p).params for p in res.checkpoints)
    for k in a:
        np.testing.assert_allclose(out.params[k], (a[k] + b[k]) / 2, rtol=0, atol=1e-15)


def test_average_k1_picks_lowest_dev_cer(corpus, tmp_path):
    res = finetune(corpus, tmp_path / "f", epochs=3)
    av = average(corpus, tmp_path / "av", res.checkpoints, 1)
    best = min(range(3), key=lambda i: av.extra["scores"][i])
    out = Checkpoint.load(av.checkpoints[0])
    src = Checkpoint.load(res.checkpoints[best])
    assert all(out.params[k].tobytes() == src.params[k].tobytes() for k in src.params)


def test_average_rejects_mismatched_configs(corpus, tmp_path, pretrained):
    other = tmp_path / "w"
    text = run_cfg(other) + f"[data]\nmanifest = {corpus['pre']}\n[train]\nepochs = 1\nbatch_size = 8\n"
    wide = pipeline.cmd_pretrain(stage_config("pretrain", corpus["root"], text, model=MODEL_WIDER))
    with pytest.raises(ConfigError):
        average(corpus, tmp_path / "av", [pretrained, wide.checkpoints[0]], 2)
    with pytest.raises(ConfigError):
        average(corpus, tmp_path / "av", [pretrained], 2)


# evaluation -------------------------------------------------------------------------------------

def test_eval_aggregates_per_utterance_records(corpus, tmp_path, pretrained):
    ft = finetune(corpus, tmp_path / "f", epochs=1, init=pretrained)
    text = run_cfg(tmp_path / "ev") + f"[data]\nmanifest = {corpus['dev']}\n"
    res = pipeline.cmd_eval(stage_config("eval", corpus["root"], text), ft.checkpoints[-1])
    lines = [json.loads(l) for l in (res.out_dir / "eval.jsonl").read_text().splitlines()]
    assert len(lines) == 4
    report = json.loads((res.out_dir / "report.json").read_text())
    assert report["corpus_cer"] == sum(r["edits"] for r in lines) / sum(r["ref_len"] for r in lines)
    assert report["total_ref_len"] == sum(len(r["ref"]) for r in lines)


def test_untrained_model_has_high_cer(tmp_path):
    synth = run_cfg("d", seed=5) + ("[synth]\nn = 6\nmin_frames = 40\nmax_frames = 60\nfeat_dim = 6\n"
                                   "vocab_size = 5\nlabeled = true\n")
    manifest = pipeline.cmd_synth(stage_config("synth", tmp_path, synth)).extra["manifest"]
    model = MODEL_WIDER.replace("vocab_size = 4", "vocab_size = 5")
    text = run_cfg("ft") + f"[data]\nmanifest = {manifest}\ndev_manifest = {manifest}\n[train]\nepochs = 0\n"
    ft = pipeline.cmd_finetune(stage_config("finetune", tmp_path, text, model=model))
    assert ft.checkpoints == []
    ck = Checkpoint(pipeline.params_to_arrays(init_params(ft_model(model), 0)), ft_model(model), "finetune",
                    normalizer=ft.extra["normalizer"])
    path = ck.save(tmp_path / "untrained.mpcc")
    res = pipeline.cmd_eval(stage_config("eval", tmp_path, run_cfg("ev") + f"[data]\nmanifest = {manifest}\n",
                                         model=model), path)
    assert res.extra["report"]["corpus_cer"] > 0.5


def ft_model(model):
    return stage_config("finetune", ".", "", model=model).model.model_config()


def test_eval_needs_init(corpus, tmp_path):
    text = run_cfg(tmp_path / "ev") + f"[data]\nmanifest = {corpus['dev']}\n"
    with pytest.raises(ConfigError):
        pipeline.cmd_eval(stage_config("eval", corpus["root"], text))
