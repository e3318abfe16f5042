"""Train the localisation descriptor alone on labelled observations and score it.

Observations come from a noisy oracle walking heard-split episodes: training
data on the training layouts, the held-out set on the test layouts.  Only the
auxiliary loss is used (no policy, no RL).  The refined score comes from a
linear probe on the LSTM descriptor, trained jointly with the frame heads.

    python scripts/sdld_supervised.py --out results/sdld_supervised.json
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

import numpy as np

from sacf import autodiff as ad
from sacf.autodiff import Adam, Tensor
from sacf.metrics import oracle_action
from sacf.nets import AudioEncoder, Linear, VisualEncoder
from sacf.policy import ModelConfig
from sacf.sdld import SDLD, sdld_aux_loss
from sacf.sim import MOVE_FORWARD, STOP, TURN_LEFT, TURN_RIGHT, NavEnv, SimConfig, make_sound_bank, sample_episode, \
    seed_stream


def collect(sim: SimConfig, layouts: str, n_obs: int, seed: int, explore: float = 0.3) -> dict[str, np.ndarray]:
    """Concatenated episodes with a ``starts`` flag on each episode's first step."""
    sounds = make_sound_bank(sim.sound_seed, sim.bands, sim.n_heard, sim.n_unheard)
    rng = seed_stream(seed, "sdld-data", 0 if layouts == "train" else 1)
    cols = {k: [] for k in ("depth", "audio", "dist", "angle", "reached", "starts")}
    k = 0
    while len(cols["depth"]) < n_obs:
        spec = sample_episode(int(rng.integers(2**31)), "heard", sim, layouts)
        env = NavEnv(sim, sounds, seed_stream(seed, "sdld-noise", k))
        k += 1
        res = env.reset(spec)
        first = True
        while len(cols["depth"]) < n_obs:
            cols["depth"].append(res.depth)
            cols["audio"].append(res.audio)
            cols["dist"].append(res.truth.distance_bin)
            cols["angle"].append(res.truth.angle_bin)
            cols["reached"].append(res.truth.reached)
            cols["starts"].append(first)
            first = False
            a = oracle_action(spec.grid, spec.source, env.pose, spec.success_radius)
            if rng.random() < explore:
                a = int(rng.choice([MOVE_FORWARD, TURN_LEFT, TURN_RIGHT]))
            if a == STOP and rng.random() < 0.5:
                # linger near the source for a while before ending the episode
                a = int(rng.choice([TURN_LEFT, TURN_RIGHT]))
            res = env.step(a)
            if env.done:
                break
    out = {k: np.asarray(v) for k, v in cols.items()}
    out["depth"] = out["depth"].astype(np.float32)
    out["audio"] = out["audio"].astype(np.float32)
    return out


class Localiser:
    def __init__(self, mc: ModelConfig, rng: np.random.Generator):
        self.visual = VisualEncoder(mc.visual, rng)
        self.audio = AudioEncoder(mc.audio, rng)
        self.sdld = SDLD(mc.sdld, mc.visual.channels, mc.audio.channels, rng)
        self.probe = Linear(mc.sdld.descriptor_dim, 2 * mc.sdld.bins, rng)
        self.bins = mc.sdld.bins

    def parameters(self):
        # the pooled audio embedding only feeds the policy, so its projection is left out
        audio = [self.audio.fc.weight, self.audio.fc.bias]
        return [p for m in (self.visual, self.sdld, self.probe) for p in m.parameters()] + audio

    def forward(self, depth, audio, starts):
        """``depth``/``audio``/``starts`` are time-major (T, N, ...); returns frame output and probe logits."""
        T, N = starts.shape
        M = T * N
        f_v = self.visual(Tensor(depth.reshape(M, -1)))
        f_a, _ = self.audio(Tensor(audio.reshape(M, *audio.shape[2:])))
        fr = self.sdld.frame(f_v, f_a)
        trip = ad.reshape(fr.triplet, (T, N, 3))
        h, c = self.sdld.zero_state(N)
        hs = []
        for t in range(T):
            keep = Tensor((1.0 - starts[t].astype(np.float64))[:, None])
            h, (_, c) = self.sdld.lstm(trip[t], (ad.mul(h, keep), ad.mul(c, keep)))
            hs.append(h)
        g = self.sdld.out(ad.concat(hs, axis=0))
        return fr, self.probe(g)


def time_major(data: dict[str, np.ndarray], idx: np.ndarray) -> dict[str, np.ndarray]:
    """Gather chunks ``idx`` (N, T) of the flat stream into (T, N, ...) arrays."""
    return {k: np.swapaxes(v[idx], 0, 1) for k, v in data.items()}


def chunk_starts(data, length: int) -> np.ndarray:
    n = len(data["starts"]) // length
    return np.arange(n) * length


def loss_fn(model: Localiser, batch) -> Tensor:
    T, N = batch["starts"].shape
    starts = batch["starts"].copy()
    starts[0] = True
    fr, probe = model.forward(batch["depth"], batch["audio"], starts)
    k = model.bins
    dist, angle, reached = (batch[n].reshape(-1) for n in ("dist", "angle", "reached"))
    frame_loss = sdld_aux_loss(fr.logits_d, fr.logits_theta, fr.sed_logit, dist, angle, reached, k)
    refined_loss = sdld_aux_loss(probe[:, :k], probe[:, k:], fr.sed_logit, dist, angle, reached, k)
    return ad.add(frame_loss, refined_loss)


def within_one(pred: np.ndarray, truth: np.ndarray, bins: int, circular: bool) -> float:
    diff = np.abs(pred - truth)
    if circular:
        diff = np.minimum(diff, bins - diff)
    return float(100.0 * np.mean(diff <= 1))


def score(model: Localiser, data: dict[str, np.ndarray], streams: int = 20) -> dict[str, float]:
    """Run the held-out data as ``streams`` long sequences so the LSTM sees whole episodes."""
    n = len(data["starts"]) // streams * streams
    idx = np.arange(n).reshape(streams, -1)
    batch = time_major(data, idx)
    starts = batch["starts"].copy()
    starts[0] = True
    with ad.no_grad():
        fr, probe = model.forward(batch["depth"], batch["audio"], starts)
    k = model.bins
    dist, angle = batch["dist"].reshape(-1), batch["angle"].reshape(-1)
    fd, ft = np.argmax(fr.logits_d.values, -1), np.argmax(fr.logits_theta.values, -1)
    rd, rt = np.argmax(probe.values[:, :k], -1), np.argmax(probe.values[:, k:], -1)
    return {
        "frame_distance_within_one": within_one(fd, dist, k, False),
        "frame_angle_within_one": within_one(ft, angle, k, True),
        "refined_distance_within_one": within_one(rd, dist, k, False),
        "refined_angle_within_one": within_one(rt, angle, k, True),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="results/sdld_supervised.json")
    ap.add_argument("--train-obs", type=int, default=20_000)
    ap.add_argument("--test-obs", type=int, default=4_000)
    ap.add_argument("--epochs", type=int, default=120)
    ap.add_argument("--chunk", type=int, default=32)
    ap.add_argument("--batch", type=int, default=16, help="chunks per gradient step")
    ap.add_argument("--lr", type=float, default=3e-3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    t0 = time.time()
    sim = SimConfig()
    train = collect(sim, "train", args.train_obs, args.seed)
    test = collect(sim, "test", args.test_obs, args.seed)
    print(f"collected {len(train['starts'])} train / {len(test['starts'])} held-out observations "
          f"({time.time() - t0:.0f}s)", flush=True)

    model = Localiser(ModelConfig(), seed_stream(args.seed, "sdld-init"))
    params = model.parameters()
    chunks = chunk_starts(train, args.chunk)
    steps = args.epochs * (len(chunks) // args.batch)
    opt = Adam(params, lr=args.lr, total_updates=steps)
    rng = seed_stream(args.seed, "sdld-batches")
    history = []
    for epoch in range(args.epochs):
        order = rng.permutation(chunks)
        losses = []
        for b in range(len(order) // args.batch):
            sel = order[b * args.batch : (b + 1) * args.batch]
            batch = time_major(train, sel[:, None] + np.arange(args.chunk)[None])
            opt.zero_grad()
            loss = loss_fn(model, batch)
            ad.backward(loss)
            ad.clip_grad_norm(params, 5.0)
            opt.step()
            opt.decay()
            losses.append(loss.item())
        s = score(model, test)
        fit = score(model, {k: v[: len(test["starts"])] for k, v in train.items()})
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)), **s,
                        **{"train_" + k: v for k, v in fit.items()}})
        print(f"epoch {epoch + 1} loss {np.mean(losses):.4f} " + " ".join(f"{k} {v:.1f}" for k, v in s.items())
              + f" ({time.time() - t0:.0f}s)", flush=True)

    final = history[-1]
    result = {**{k: v for k, v in final.items() if k != "epoch"},
              "train_obs": int(len(train["starts"])), "test_obs": int(len(test["starts"])),
              "epochs": args.epochs, "seconds": time.time() - t0, "history": history}
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=2) + "\n")
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
