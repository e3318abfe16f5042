import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sacf import checkpoint as ckpt_io
from sacf import config as config_io
from sacf.acvf import FusionVariant
from sacf.autodiff import Adam, ContractViolation
from sacf.config import ExperimentConfig
from sacf.experiment import build_policy, train


def test_default_round_trip():
    cfg = ExperimentConfig()
    assert config_io.dumps(config_io.loads(config_io.dumps(cfg))) == config_io.dumps(cfg)
    assert config_io.loads(config_io.dumps(cfg)) == cfg


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-6, 1.0), st.sampled_from(list(FusionVariant)),
       st.tuples(st.integers(1, 64), st.integers(1, 64)), st.integers(1, 5000))
def test_overrides_round_trip(seed, lr, variant, conv, updates):
    cfg = ExperimentConfig()
    cfg.run.seed, cfg.ppo.lr, cfg.model.variant = seed, lr, variant
    cfg.model.visual.conv_channels, cfg.ppo.updates = conv, updates
    back = config_io.loads(config_io.dumps(cfg))
    assert back == cfg
    assert back.ppo.lr == lr


def test_comments_and_blank_lines_ignored():
    cfg = config_io.loads("# header\n\nppo.updates = 7   # trailing\n")
    assert cfg.ppo.updates == 7


def test_unknown_key_rejected_with_line_number():
    with pytest.raises(ContractViolation, match="line 2"):
        config_io.loads("ppo.updates = 3\nppo.momentum = 0.9\n")
    with pytest.raises(ContractViolation):
        config_io.loads("nosuch.section.key = 1\n")


def test_bad_values_rejected():
    for text in ("ppo.updates = many", "model.variant = transformer", "model.visual.conv_channels = 1, 2, 3",
                 "ppo.updates 5", "model.visual = 3"):
        with pytest.raises(ContractViolation):
            config_io.loads(text)


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        config_io.load("/nonexistent/run.cfg")


def test_validate_rejects_inconsistent_configs():
    for key, value in (("model.visual.channels", "0"), ("ppo.minibatches", "2"), ("model.audio.map_size", "3"),
                       ("sim.rays", "16"), ("ppo.horizon", "0")):
        cfg = ExperimentConfig()
        config_io.set_key(cfg, key, value)
        with pytest.raises(ContractViolation):
            config_io.validate(cfg)


def test_shipped_default_config_matches_dataclass_defaults():
    shipped = Path(__file__).resolve().parents[1] / "configs" / "default.cfg"
    assert config_io.load(shipped) == ExperimentConfig()


def test_digest_tracks_model_section_only():
    a, b = ExperimentConfig(), ExperimentConfig()
    b.ppo.lr = 1.0
    b.run.seed = 9
    assert config_io.model_digest(a) == config_io.model_digest(b)
    b.model.gru_hidden = 64
    assert config_io.model_digest(a) != config_io.model_digest(b)


# ---------------------------------------------------------------- checkpoints


def small_cfg():
    cfg = ExperimentConfig()
    for key, value in (("sim.width", "10"), ("sim.height", "10"), ("sim.min_hops", "2"), ("sim.max_hops", "8"),
                       ("sim.split_depth", "1"), ("sim.obstacles", "2"), ("sim.train_layouts", "10"),
                       ("sim.test_layouts", "5"), ("ppo.updates", "4"), ("ppo.horizon", "16"),
                       ("run.eval_every", "2"), ("run.eval_episodes", "3"), ("run.final_eval_episodes", "4"),
                       ("run.checkpoint_every", "2")):
        config_io.set_key(cfg, key, value)
    return cfg


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    cfg = ExperimentConfig()
    pol = build_policy(cfg, 3)
    opt = Adam(pol.parameters(), lr=1e-3, total_updates=10)
    for k, p in enumerate(pol.parameters()):
        opt.m[k][...] = np.float32(k)
    opt.update, opt.t = 4, 16
    path = tmp_path / "a.ckpt"
    digest = config_io.model_digest(cfg)
    ckpt_io.save(path, pol, digest, opt)
    other = build_policy(cfg, 99)
    opt2 = Adam(other.parameters(), lr=1e-3, total_updates=10)
    ckpt_io.restore(ckpt_io.load(path), other, digest, opt2)
    for a, b in zip(pol.parameters(), other.parameters()):
        assert a.values.tobytes() == b.values.tobytes()
    assert (opt2.update, opt2.t) == (4, 16)
    assert opt2.lr == pytest.approx(opt.lr)
    # saving the restored model gives the same bytes
    ckpt_io.save(tmp_path / "b.ckpt", other, digest, opt2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_manifest_layout(tmp_path):
    cfg = ExperimentConfig()
    pol = build_policy(cfg, 0)
    blob = ckpt_io.encode(ckpt_io.capture(pol, "d"))

    head, payload = blob.split(b"\n", 1)
    manifest = json.loads(head)
    assert manifest["format"] == 1
    assert manifest["payload_bytes"] == len(payload) == 4 * sum(p.size for p in pol.parameters())
    first = manifest["params"][0]
    arr = np.frombuffer(payload[: first["nbytes"]], dtype="<f4").reshape(first["shape"])
    assert arr.tobytes() == pol.parameters()[0].values.astype("<f4").tobytes()


def test_truncated_checkpoint_refused(tmp_path):
    pol = build_policy(ExperimentConfig(), 0)
    blob = ckpt_io.encode(ckpt_io.capture(pol, "d"))
    with pytest.raises(ContractViolation, match="bytes"):
        ckpt_io.decode(blob[:-4])
    with pytest.raises(ContractViolation):
        ckpt_io.decode(b"not a checkpoint")


def test_digest_mismatch_refused():
    pol = build_policy(ExperimentConfig(), 0)
    with pytest.raises(ContractViolation, match="digest"):
        ckpt_io.restore(ckpt_io.capture(pol, "aaaa"), pol, "bbbb")


def test_missing_parameter_refused():
    cfg = ExperimentConfig()
    concat = ExperimentConfig()
    concat.model.variant = FusionVariant.CONCAT
    ck = ckpt_io.capture(build_policy(concat, 0), "same")
    with pytest.raises(ContractViolation):
        ckpt_io.restore(ck, build_policy(cfg, 0), "same")


def test_resume_continues_lr_schedule(tmp_path):
    cfg = small_cfg()
    res = train(cfg, tmp_path / "full")
    assert res.final_checkpoint.exists()
    ck = tmp_path / "full" / "checkpoints" / "update_000002.ckpt"
    assert ckpt_io.load(ck).update == 2
    train(small_cfg(), tmp_path / "resumed", resume=ck)
    rows = [ln.split() for ln in (tmp_path / "resumed" / "train.log").read_text().splitlines()
            if not ln.startswith("#")]
    assert [int(r[0]) for r in rows] == [2, 3]
    assert [float(r[-1]) for r in rows] == pytest.approx([2.5e-4 * 0.5, 2.5e-4 * 0.25])
