"""The two-axis recurrent model over piano rolls.

One LSTM stack scans time with every note as an independent row (tied
weights), a second stack scans the note axis at each step so the joint
distribution over a column factorizes note by note, conditioned on the
pairs already decided below. Logits at step t predict the column at
t + 1; training feeds the ground-truth next column back along the note
axis (teacher forcing) while generation feeds back its own samples.

All heavy passes batch their rows: the time scan runs batch*notes rows
in parallel and the note scan batch*steps rows, so the per-step work is
a handful of large matrix products.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from .features import FEATURE_WIDTH, expand_batch, expand_columns
from .midiio import NoteStateMatrix


@dataclass
class BiaxialParams:
    """Weights for both stacks and the two-unit output projection."""

    timewise: list
    notewise: list
    proj_w: np.ndarray   # (2, notewise top hidden)
    proj_b: np.ndarray   # (2,)

    def validate(self):
        for stack in (self.timewise, self.notewise):
            if not stack:
                raise ValueError("a stack has no layers")
            for layer in stack:
                layer.validate()
            for below, above in zip(stack, stack[1:]):
                if above.input_size != below.hidden_size:
                    raise ValueError("stack layer sizes do not chain")
        expected = self.timewise[-1].hidden_size + 2
        if self.notewise[0].input_size != expected:
            raise ValueError(
                f"notewise layer 0 consumes {self.notewise[0].input_size} "
                f"inputs, expected timewise top hidden + 2 = {expected}")
        if self.proj_w.shape != (2, self.notewise[-1].hidden_size):
            raise ValueError("projection shape does not match top hidden")
        if self.proj_b.shape != (2,):
            raise ValueError("projection bias must have shape (2,)")

    def copy(self):
        return BiaxialParams(
            [lay.copy() for lay in self.timewise],
            [lay.copy() for lay in self.notewise],
            self.proj_w.copy(), self.proj_b.copy())


def init_biaxial_params(timewise_hidden, notewise_hidden, rng,
                        feature_width=FEATURE_WIDTH) -> BiaxialParams:
    timewise, notewise = [], []
    size = feature_width
    for hidden in timewise_hidden:
        timewise.append(nn.LstmCellParams.fresh(size, hidden, rng))
        size = hidden
    size = timewise_hidden[-1] + 2
    for hidden in notewise_hidden:
        notewise.append(nn.LstmCellParams.fresh(size, hidden, rng))
        size = hidden
    bound = 1.0 / np.sqrt(notewise_hidden[-1])
    proj_w = rng.uniform(-bound, bound, size=(2, notewise_hidden[-1]))
    params = BiaxialParams(timewise, notewise, proj_w, np.zeros(2))
    params.validate()
    return params


def param_arrays(params: BiaxialParams) -> dict:
    """Stable name -> array view of every trainable tensor."""
    out = {}
    for stack_name, stack in (("timewise", params.timewise),
                              ("notewise", params.notewise)):
        for i, layer in enumerate(stack):
            out.update(layer.named_arrays(f"{stack_name}/{i}/"))
    out["proj/w"] = params.proj_w
    out["proj/b"] = params.proj_b
    return out


def params_from_arrays(arrays: dict) -> BiaxialParams:
    """Rebuild parameters from named arrays (checkpoint restore)."""
    def build_stack(prefix):
        indices = sorted({int(name.split("/")[1]) for name in arrays
                          if name.startswith(prefix + "/")})
        stack = []
        for i in indices:
            fields = {}
            for fname in nn.LstmCellParams.GATE_FIELDS:
                key = f"{prefix}/{i}/{fname}"
                if key not in arrays:
                    raise ValueError(f"checkpoint is missing {key}")
                fields[fname] = np.array(arrays[key], dtype=np.float64)
            hidden = fields["w_i"].shape[0]
            stack.append(nn.LstmCellParams(
                input_size=fields["w_i"].shape[1] - hidden,
                hidden_size=hidden, **fields))
        return stack

    for key in ("proj/w", "proj/b"):
        if key not in arrays:
            raise ValueError(f"checkpoint is missing {key}")
    params = BiaxialParams(build_stack("timewise"), build_stack("notewise"),
                           np.array(arrays["proj/w"], dtype=np.float64),
                           np.array(arrays["proj/b"], dtype=np.float64))
    params.validate()
    return params


def timewise_pass(feats: np.ndarray, layers, keep_masks=None):
    """Scan the time axis. feats (B, N, T, F) -> (B, N, T, H_top).

    Notes never interact here; permuting them permutes outputs.
    """
    b, n, t, f = feats.shape
    xs = np.ascontiguousarray(
        feats.transpose(2, 0, 1, 3)).reshape(t, b * n, f)
    stream, caches, _ = nn.stack_forward(layers, xs, keep_masks=keep_masks)
    out = stream.reshape(t, b, n, -1).transpose(1, 2, 0, 3)
    return out, caches


def _to_note_major(tensor: np.ndarray) -> np.ndarray:
    """(B, N, T, X) -> (N, B*T, X) for the note-axis scan."""
    b, n, t, x = tensor.shape
    return np.ascontiguousarray(
        tensor.transpose(1, 0, 2, 3)).reshape(n, b * t, x)


def _from_note_major(tensor: np.ndarray, b: int) -> np.ndarray:
    """(N, B*T, X) -> (B, N, T, X)."""
    n, bt, x = tensor.shape
    return tensor.reshape(n, b, bt // b, x).transpose(1, 0, 2, 3)


def teacher_feedback(targets: np.ndarray) -> np.ndarray:
    """Pair fed to note n at step t: the ground-truth pair of note n-1
    in the predicted column (t + 1). Zeros at note 0 and the last step."""
    fb = np.zeros_like(targets, dtype=np.float64)
    fb[:, 1:, :-1] = targets[:, :-1, 1:]
    return fb


def sample_pairs(logits: np.ndarray, rng) -> np.ndarray:
    """Draw (play, articulate) Bernoulli pairs from logits (..., 2).

    A pair that comes out (0, 1) is forced to (0, 0): a silent note
    cannot be articulated. Two uniforms are always consumed per note so
    the random stream does not depend on the draws themselves.
    """
    u = rng.random(logits.shape)
    pairs = (u < nn.sigmoid(logits)).astype(np.float64)
    pairs[..., 1] *= pairs[..., 0]
    return pairs


def notewise_pass(timewise_out: np.ndarray, params: BiaxialParams,
                  targets: np.ndarray = None, rng=None, keep_masks=None):
    """Scan the note axis on top of the time scan's output.

    With targets, feedback is teacher-forced from the batch and samples
    are not drawn. Without targets, each note's sampled pair feeds the
    next note (rng required). Returns (logits, samples, cache) with
    shapes (B, N, T, 2); cache backpropagates through the realized
    inputs, treating feedback pairs as constants.
    """
    b = timewise_out.shape[0]
    base = _to_note_major(timewise_out)
    if targets is not None:
        fb = _to_note_major(teacher_feedback(targets))
        samples = None
    else:
        if rng is None:
            raise ValueError("sampling the note scan requires an rng")
        fb, samples = _sample_note_scan(params, base, rng, keep_masks)
    xs = np.concatenate([base, fb], axis=2)
    stream, caches, _ = nn.stack_forward(params.notewise, xs,
                                         keep_masks=keep_masks)
    logits = stream @ params.proj_w.T + params.proj_b
    cache = (caches, stream, xs)
    return (_from_note_major(logits, b),
            None if samples is None else _from_note_major(samples, b),
            cache)


def _sample_note_scan(params: BiaxialParams, base: np.ndarray, rng,
                      keep_masks=None):
    """Run the note scan sequentially, sampling each note's pair and
    feeding it to the next. Returns (feedback, samples), both (N, R, 2);
    feedback[n] is the pair sampled at note n-1."""
    n, r, _ = base.shape
    states = [(np.zeros((r, lay.hidden_size)), np.zeros((r, lay.hidden_size)))
              for lay in params.notewise]
    fb = np.zeros((n, r, 2))
    samples = np.zeros((n, r, 2))
    prev = np.zeros((r, 2))
    for note in range(n):
        fb[note] = prev
        x = np.concatenate([base[note], prev], axis=1)
        top, states = nn.stack_step(params.notewise, x, states,
                                    keep_masks=keep_masks)
        logits = top @ params.proj_w.T + params.proj_b
        prev = sample_pairs(logits, rng)
        samples[note] = prev
    return fb, samples


def loss(logits: np.ndarray, batch: np.ndarray):
    """Masked sigmoid cross-entropy against the next step's column.

    logits and batch are (B, N, T, 2); logits at t are scored against
    the batch at t + 1, so the last step's logits go unused.
    Articulation terms are dropped wherever the target play bit is 0.
    Returns (mean loss per cell, log-likelihood per step).
    """
    ce, _, denom, rows = _cross_entropy(logits, batch)
    total = float(ce.sum())
    n = logits.shape[1]
    return total / denom, -total / (denom / n)


def _cross_entropy(logits, batch):
    targets = np.asarray(batch, dtype=np.float64)
    lg = logits[:, :, :-1]
    tg = targets[:, :, 1:]
    ce = np.maximum(lg, 0.0) - lg * tg + np.log1p(np.exp(-np.abs(lg)))
    mask = np.ones_like(ce)
    mask[..., 1] = tg[..., 0]
    ce = ce * mask
    b, n, t_eff = lg.shape[:3]
    return ce, (lg, tg, mask), b * n * t_eff, b * t_eff


def loss_with_gradient(logits, batch):
    """loss() plus d(loss)/d(logits), zero at the final step and at
    masked articulation cells."""
    ce, (lg, tg, mask), denom, _ = _cross_entropy(logits, batch)
    total = float(ce.sum())
    dlogits = np.zeros_like(logits)
    dlogits[:, :, :-1] = (nn.sigmoid(lg) - tg) * mask / denom
    n = logits.shape[1]
    return total / denom, -total / (denom / n), dlogits


def loss_gradients(params: BiaxialParams, batch: np.ndarray, note_low: int,
                   rng=None, keep_prob=1.0, teacher_forcing=True):
    """One full forward/backward pass over a batch of rolls (B, N, T, 2).

    Returns (loss value, log-likelihood per step, grads dict keyed like
    param_arrays). Dropout masks, when active, are drawn once here and
    shared by forward and backward.
    """
    b, n, t, _ = batch.shape
    masks_t = masks_n = None
    if keep_prob < 1.0:
        if rng is None:
            raise ValueError("dropout requires an rng")
        masks_t = [nn.dropout_mask((b * n, lay.hidden_size), keep_prob, rng)
                   for lay in params.timewise]
        masks_n = [nn.dropout_mask((b * t, lay.hidden_size), keep_prob, rng)
                   for lay in params.notewise]
    feats = expand_batch(batch, note_low)
    timewise_out, caches_t = timewise_pass(feats, params.timewise, masks_t)
    logits, _, (caches_n, stream_n, _) = notewise_pass(
        timewise_out, params,
        targets=np.asarray(batch, dtype=np.float64) if teacher_forcing
        else None,
        rng=rng, keep_masks=masks_n)
    value, loglik, dlogits = loss_with_gradient(logits, batch)

    dlogits_r = _to_note_major(dlogits)
    grads = {"proj/w": np.einsum("nrk,nrh->kh", dlogits_r, stream_n),
             "proj/b": dlogits_r.sum(axis=(0, 1))}
    dstream = dlogits_r @ params.proj_w
    grads_note, dxs = nn.stack_backward(params.notewise, caches_n, dstream)
    hidden_top = params.timewise[-1].hidden_size
    d_tw = _from_note_major(dxs[:, :, :hidden_top], b)
    d_tw = np.ascontiguousarray(
        d_tw.transpose(2, 0, 1, 3)).reshape(t, b * n, hidden_top)
    grads_time, _ = nn.stack_backward(params.timewise, caches_t, d_tw)
    for i, layer_grads in enumerate(grads_time):
        for fname, g in layer_grads.items():
            grads[f"timewise/{i}/{fname}"] = g
    for i, layer_grads in enumerate(grads_note):
        for fname, g in layer_grads.items():
            grads[f"notewise/{i}/{fname}"] = g
    return value, loglik, grads


def sample_segments(corpus, segment_len, batch_size, steps_per_measure, rng):
    """Stack a batch of equally long segments, starts snapped to measure
    boundaries so the beat features stay truthful."""
    batch = np.zeros((batch_size, corpus[0].n_notes, segment_len, 2))
    for k in range(batch_size):
        song = corpus[int(rng.integers(len(corpus)))]
        slots = (song.n_steps - segment_len) // steps_per_measure + 1
        start = steps_per_measure * int(rng.integers(slots))
        batch[k] = song.data[:, start:start + segment_len]
    return batch


def train(corpus, cfg, rng, params: BiaxialParams = None):
    """Fit the model on a list of NoteStateMatrix scores.

    Songs shorter than the segment length are skipped with a warning;
    if nothing remains this is an error. Returns (params, history) with
    one (iteration, loss, log-likelihood per step) row per iteration.
    """
    if not corpus:
        raise ValueError("training corpus is empty")
    for m in corpus:
        if m.n_notes != cfg.n_notes or m.note_low != cfg.note_low:
            raise ValueError("corpus note range does not match config")
    usable = []
    for i, m in enumerate(corpus):
        if m.n_steps < cfg.segment_len:
            warnings.warn(f"corpus item {i} has {m.n_steps} steps, "
                          f"shorter than segment_len {cfg.segment_len}; "
                          f"skipped")
        else:
            usable.append(m)
    if not usable:
        raise ValueError("every corpus item is shorter than segment_len")

    if params is None:
        params = init_biaxial_params(cfg.timewise_hidden, cfg.notewise_hidden,
                                     rng)
    opt = nn.Adadelta(rho=cfg.adadelta_rho, eps=cfg.adadelta_eps,
                      lr=cfg.learning_rate)
    arrays = param_arrays(params)
    history = []
    for it in range(cfg.iterations):
        batch = sample_segments(usable, cfg.segment_len, cfg.batch_size,
                                cfg.steps_per_measure, rng)
        value, loglik, grads = loss_gradients(
            params, batch, cfg.note_low, rng=rng, keep_prob=cfg.keep_prob,
            teacher_forcing=cfg.teacher_forcing)
        opt.step(arrays, grads)
        history.append((it, value, loglik))
    return params, history


def generate(params: BiaxialParams, cfg, steps: int, rng,
             seed: NoteStateMatrix = None) -> NoteStateMatrix:
    """Free-run the model one step at a time.

    The seed (default: a single silent step) is fed through the time
    scan to warm its state, sitting just before position 0 so the first
    generated column lands on a measure boundary. Each sampled column is
    fed back as the next input. No dropout is active here.
    """
    n = cfg.n_notes
    if seed is None:
        seed_cols = np.zeros((1, n, 2))
    else:
        if seed.n_notes != n or seed.note_low != cfg.note_low:
            raise ValueError("seed note range does not match config")
        seed_cols = np.asarray(seed.data, dtype=np.float64).transpose(1, 0, 2)
    states = [(np.zeros((n, lay.hidden_size)), np.zeros((n, lay.hidden_size)))
              for lay in params.timewise]
    n_seed = seed_cols.shape[0]
    top = None
    for k in range(n_seed):
        feats = expand_columns(seed_cols[k][None], cfg.note_low,
                               np.array([k - n_seed]))[0]
        top, states = nn.stack_step(params.timewise, feats, states)

    out = np.zeros((n, steps, 2), dtype=np.uint8)
    # The returned matrix stands alone, so every note sounding at its
    # first step is a run start there even when the seed held it.
    prev_play = np.zeros(n, dtype=bool)
    for j in range(steps):
        col = _sample_single_column(params, top, rng)
        # A note switching on out of silence is an onset by definition,
        # so its articulation bit must be set.
        col[:, 1] |= col[:, 0] & ~prev_play
        prev_play = col[:, 0] > 0
        out[:, j] = col
        feats = expand_columns(col[None].astype(np.float64), cfg.note_low,
                               np.array([j]))[0]
        top, states = nn.stack_step(params.timewise, feats, states)
    return NoteStateMatrix(out, cfg.note_low, cfg.steps_per_measure)


def _sample_single_column(params: BiaxialParams, top: np.ndarray, rng):
    """Sample one column (N, 2) given the time scan's top output (N, H)."""
    base = top[:, None, :]                       # (N, 1, H)
    _, samples = _sample_note_scan(params, base, rng)
    return samples[:, 0, :].astype(np.uint8)
