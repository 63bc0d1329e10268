"""Q-learning refinement of a monophonic melody policy.

Three networks share one recurrent trunk architecture: the frozen
reward model (the primed polyphonic net), the online Q-network, and its
slowly tracking target copy. Melodies use the 38-action encoding from
midiio (note-off, hold, 36 pitch onsets). Each action becomes a roll
column, the trunk consumes it, and a fixed projection turns the per-
note (play, articulate) logits into 38 action scores:

  * onset of melody row m:   log sig(play_m) + log sig(artic_m)
  * hold while m sounds:     log sig(play_m) + log(1 - sig(artic_m))
  * hold in silence:         sum over melody rows of log(1 - sig(play))
  * note-off:                the same all-silent score, minus ln 2 when
                             already silent so the two actions differ

The reward model normalizes the scores into a log-distribution; the
Q-network feeds the raw scores through a square head that starts as the
identity, so its rankings initially match the primed model exactly.

Replay stores, per transition, the trunk cells from collection time;
updates re-run only the final step from those cells (they are treated
as constants), so gradients reach every trunk weight without replaying
whole melodies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .features import expand_columns
from .midiio import (MELODY_ACTIONS, MELODY_HIGH, MELODY_LOW,
                     MELODY_NO_EVENT, MELODY_NOTE_OFF)
from .model import BiaxialParams, param_arrays, params_from_arrays
from .theory import TheoryConfig, theory_reward

N_MELODY_ROWS = MELODY_HIGH - MELODY_LOW + 1
LN2 = float(np.log(2.0))


def melody_rows(note_low: int, n_notes: int) -> slice:
    """Rows of the note axis that carry the 36 melody pitches."""
    lo = MELODY_LOW - note_low
    if lo < 0 or note_low + n_notes <= MELODY_HIGH:
        raise ValueError(
            f"note range [{note_low}, {note_low + n_notes}) does not cover "
            f"the melody pitches {MELODY_LOW}..{MELODY_HIGH}")
    return slice(lo, lo + N_MELODY_ROWS)


def next_sounding(action: int, sounding):
    """Melody row sounding after an action; None means silence."""
    if action >= 2:
        return action - 2
    if action == MELODY_NOTE_OFF:
        return None
    return sounding


def action_column(action: int, sounding, note_low: int,
                  n_notes: int) -> np.ndarray:
    """Roll column (n_notes, 2) realized by an action."""
    rows = melody_rows(note_low, n_notes)
    col = np.zeros((n_notes, 2))
    if action >= 2:
        col[rows.start + action - 2] = (1.0, 1.0)
    elif action == MELODY_NO_EVENT and sounding is not None:
        col[rows.start + sounding] = (1.0, 0.0)
    return col


@dataclass
class TrunkSnapshot:
    """A state, materialized for replay: the recurrent cells before the
    last column, that column with its measure position, and the melody
    row left sounding after it. Advancing the cells through the column
    reproduces the trunk output that scores this state's actions."""

    cells: list              # per layer (h, c), each (n_notes, hidden)
    col: np.ndarray          # (n_notes, 2)
    pos: int
    sounding: object         # melody row index or None


@dataclass
class Transition:
    state: object
    action: int
    reward: float
    next_state: object
    terminal: bool

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError(f"transition reward must be finite, "
                             f"got {self.reward}")
        if not 0 <= self.action < MELODY_ACTIONS:
            raise ValueError(f"action {self.action} out of range")


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform sampling
    (with replacement)."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = capacity
        self._items = []
        self._next = 0

    def __len__(self):
        return len(self._items)

    def append(self, transition: Transition):
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def sample(self, n: int, rng) -> list:
        if not self._items:
            raise ValueError("cannot sample from an empty replay buffer")
        idx = rng.integers(len(self._items), size=n)
        return [self._items[i] for i in idx]


def fresh_snapshot(trunk: BiaxialParams, n_notes: int) -> TrunkSnapshot:
    """Episode-opening state: zero cells about to consume one silent
    column just before position 0, nothing sounding."""
    cells = [(np.zeros((n_notes, lay.hidden_size)),
              np.zeros((n_notes, lay.hidden_size)))
             for lay in trunk.timewise]
    return TrunkSnapshot(cells, np.zeros((n_notes, 2)), -1, None)


def trunk_scores(trunk: BiaxialParams, note_low: int, snapshots: list):
    """Advance each snapshot one step and project 38 action scores.

    Returns (scores (B, 38), advanced cells per layer as (B*N, hidden)
    arrays, cache for trunk_scores_backward). The stored cells are
    inputs here, never differentiated through.
    """
    b = len(snapshots)
    n = snapshots[0].col.shape[0]
    rows = melody_rows(note_low, n)
    cols = np.stack([s.col for s in snapshots])
    positions = np.array([s.pos for s in snapshots])
    feats = expand_columns(cols, note_low, positions)
    xs = feats.reshape(1, b * n, -1)
    init = [(np.concatenate([s.cells[li][0] for s in snapshots]),
             np.concatenate([s.cells[li][1] for s in snapshots]))
            for li in range(len(trunk.timewise))]
    stream, t_caches, finals = nn.stack_forward(trunk.timewise, xs,
                                                init_states=init)
    top = stream[0].reshape(b, n, -1).transpose(1, 0, 2)    # (N, B, Ht)
    xs_note = np.concatenate([top, np.zeros((n, b, 2))], axis=2)
    stream_n, n_caches, _ = nn.stack_forward(trunk.notewise, xs_note)
    logits = stream_n @ trunk.proj_w.T + trunk.proj_b       # (N, B, 2)

    mel = logits[rows]
    lp = nn.log_sigmoid(mel[:, :, 0])
    lnp = nn.log_sigmoid(-mel[:, :, 0])
    la = nn.log_sigmoid(mel[:, :, 1])
    lna = nn.log_sigmoid(-mel[:, :, 1])
    silent = lnp.sum(axis=0)
    scores = np.zeros((b, MELODY_ACTIONS))
    scores[:, 2:] = (lp + la).T
    for k, snap in enumerate(snapshots):
        if snap.sounding is None:
            scores[k, MELODY_NO_EVENT] = silent[k]
            scores[k, MELODY_NOTE_OFF] = silent[k] - LN2
        else:
            m = snap.sounding
            scores[k, MELODY_NO_EVENT] = lp[m, k] + lna[m, k]
            scores[k, MELODY_NOTE_OFF] = silent[k]
    soundings = [s.sounding for s in snapshots]
    cache = (t_caches, n_caches, stream_n, logits, soundings, rows, b, n)
    return scores, finals, cache


def trunk_scores_backward(trunk: BiaxialParams, cache,
                          dscores: np.ndarray) -> dict:
    """Gradients of a scalar through trunk_scores, given d(scores)."""
    t_caches, n_caches, stream_n, logits, soundings, rows, b, n = cache
    n_mel = rows.stop - rows.start
    dlp = np.ascontiguousarray(dscores[:, 2:].T)
    dla = dlp.copy()
    dlnp = np.zeros((n_mel, b))
    dlna = np.zeros((n_mel, b))
    for k, snd in enumerate(soundings):
        if snd is None:
            dlnp[:, k] += dscores[k, MELODY_NO_EVENT]
            dlnp[:, k] += dscores[k, MELODY_NOTE_OFF]
        else:
            dlp[snd, k] += dscores[k, MELODY_NO_EVENT]
            dlna[snd, k] += dscores[k, MELODY_NO_EVENT]
            dlnp[:, k] += dscores[k, MELODY_NOTE_OFF]
    mel = logits[rows]
    sig_p = nn.sigmoid(mel[:, :, 0])
    sig_a = nn.sigmoid(mel[:, :, 1])
    dlogits = np.zeros_like(logits)
    dlogits[rows, :, 0] = dlp * (1.0 - sig_p) - dlnp * sig_p
    dlogits[rows, :, 1] = dla * (1.0 - sig_a) - dlna * sig_a

    grads = {"proj/w": np.einsum("nbk,nbh->kh", dlogits, stream_n),
             "proj/b": dlogits.sum(axis=(0, 1))}
    dstream_n = dlogits @ trunk.proj_w
    g_note, dxs_note = nn.stack_backward(trunk.notewise, n_caches,
                                         dstream_n)
    ht = trunk.timewise[-1].hidden_size
    dtop = np.ascontiguousarray(
        dxs_note[:, :, :ht].transpose(1, 0, 2)).reshape(1, b * n, ht)
    g_time, _ = nn.stack_backward(trunk.timewise, t_caches, dtop)
    for i, layer_grads in enumerate(g_time):
        for fname, g in layer_grads.items():
            grads[f"timewise/{i}/{fname}"] = g
    for i, layer_grads in enumerate(g_note):
        for fname, g in layer_grads.items():
            grads[f"notewise/{i}/{fname}"] = g
    return grads


def _split_cells(finals, sample: int, n: int) -> list:
    return [(h[sample * n:(sample + 1) * n], c[sample * n:(sample + 1) * n])
            for h, c in finals]


@dataclass
class RewardModel:
    """The primed model, frozen, serving log p(action | melody)."""

    trunk: BiaxialParams
    note_low: int
    n_notes: int

    def start(self) -> TrunkSnapshot:
        return fresh_snapshot(self.trunk, self.n_notes)

    def log_dist(self, snapshot: TrunkSnapshot):
        """Normalized log-probabilities over the 38 actions, plus the
        advanced trunk cells for chaining the next snapshot."""
        scores, finals, _ = trunk_scores(self.trunk, self.note_low,
                                         [snapshot])
        row = scores[0]
        return row - nn.logsumexp(row), _split_cells(finals, 0, self.n_notes)


def melody_log_prob(reward_model: RewardModel, snapshot: TrunkSnapshot,
                    action: int):
    """log p(action | state) under the frozen primed model, and the
    full 38-way log-distribution it came from."""
    dist, _ = reward_model.log_dist(snapshot)
    return float(dist[action]), dist


def blended_reward(reward_model: RewardModel, snapshot: TrunkSnapshot,
                   action: int, breakdown, c: float) -> float:
    """log p(a|s) plus the rule reward scaled by 1/c."""
    if c == 0.0:
        raise ValueError("reward weight c cannot be zero")
    log_p, _ = melody_log_prob(reward_model, snapshot, action)
    return log_p + breakdown.total / c


@dataclass
class MelodyQNetwork:
    """Trunk copy of the primed model plus a square linear head over
    the raw projection scores. The head starts as the identity, so
    Q-values begin as the primed model's unnormalized log-scores."""

    trunk: BiaxialParams
    head_w: np.ndarray
    head_b: np.ndarray
    note_low: int
    n_notes: int

    @classmethod
    def from_primed(cls, primed: BiaxialParams, note_low: int,
                    n_notes: int) -> "MelodyQNetwork":
        melody_rows(note_low, n_notes)
        return cls(primed.copy(), np.eye(MELODY_ACTIONS),
                   np.zeros(MELODY_ACTIONS), note_low, n_notes)

    def copy(self) -> "MelodyQNetwork":
        return MelodyQNetwork(self.trunk.copy(), self.head_w.copy(),
                              self.head_b.copy(), self.note_low,
                              self.n_notes)

    def params(self) -> dict:
        out = {f"trunk/{name}": arr
               for name, arr in param_arrays(self.trunk).items()}
        out["head/w"] = self.head_w
        out["head/b"] = self.head_b
        return out

    def start(self) -> TrunkSnapshot:
        return fresh_snapshot(self.trunk, self.n_notes)

    def q_batch(self, snapshots: list):
        """(B, 38) Q-values and the cache backward() consumes."""
        scores, finals, inner = trunk_scores(self.trunk, self.note_low,
                                             snapshots)
        q = scores @ self.head_w.T + self.head_b
        return q, (inner, scores, finals)

    def act(self, snapshot: TrunkSnapshot):
        """Q-values for one state plus the advanced cells."""
        q, (_, _, finals) = self.q_batch([snapshot])
        return q[0], _split_cells(finals, 0, self.n_notes)

    def backward(self, cache, dq: np.ndarray) -> dict:
        inner, scores, _ = cache
        grads = {"head/w": dq.T @ scores, "head/b": dq.sum(axis=0)}
        dscores = dq @ self.head_w
        for name, g in trunk_scores_backward(self.trunk, inner,
                                             dscores).items():
            grads[f"trunk/{name}"] = g
        return grads


def qnetwork_from_arrays(arrays: dict, note_low: int,
                         n_notes: int) -> MelodyQNetwork:
    """Rebuild a Q-network from its named parameter arrays, the inverse
    of MelodyQNetwork.params()."""
    trunk_arrays = {name[len("trunk/"):]: arr
                    for name, arr in arrays.items()
                    if name.startswith("trunk/")}
    if not trunk_arrays or "head/w" not in arrays or "head/b" not in arrays:
        raise ValueError("not a Q-network parameter set: expected trunk/* "
                         "sections plus head/w and head/b")
    head_w = np.asarray(arrays["head/w"], dtype=np.float64)
    head_b = np.asarray(arrays["head/b"], dtype=np.float64)
    if head_w.shape != (MELODY_ACTIONS, MELODY_ACTIONS) \
            or head_b.shape != (MELODY_ACTIONS,):
        raise ValueError(f"Q-network head has the wrong shape: "
                         f"{head_w.shape}, {head_b.shape}")
    melody_rows(note_low, n_notes)
    return MelodyQNetwork(params_from_arrays(trunk_arrays), head_w.copy(),
                          head_b.copy(), note_low, n_notes)


def target_sync(online: dict, target: dict, eta: float):
    """theta_target <- (1 - eta) * theta_target + eta * theta, in place,
    elementwise exact."""
    if not 0.0 < eta <= 1.0:
        raise ValueError(f"eta must lie in (0, 1], got {eta}")
    for name, arr in target.items():
        arr *= (1.0 - eta)
        arr += eta * online[name]


def q_targets(transitions: list, target_model, gamma: float,
              double_q: bool = False, online_model=None) -> np.ndarray:
    """Bellman targets r + gamma * max Q(s', .; theta_minus), with the
    bootstrap dropped on terminal transitions."""
    next_states = [t.next_state for t in transitions]
    q_next, _ = target_model.q_batch(next_states)
    if double_q:
        q_online, _ = online_model.q_batch(next_states)
        best = np.argmax(q_online, axis=1)
    else:
        best = np.argmax(q_next, axis=1)
    bootstrap = q_next[np.arange(len(transitions)), best]
    rewards = np.array([t.reward for t in transitions])
    terminal = np.array([t.terminal for t in transitions])
    return rewards + gamma * np.where(terminal, 0.0, bootstrap)


def q_loss_gradients(transitions: list, model, targets: np.ndarray):
    """Mean squared Bellman residual and its gradients w.r.t. model
    parameters; the targets are constants here."""
    states = [t.state for t in transitions]
    actions = np.array([t.action for t in transitions])
    q, cache = model.q_batch(states)
    picked = q[np.arange(len(transitions)), actions]
    residual = targets - picked
    if not np.all(np.isfinite(residual)):
        raise nn.NonFiniteGradientError(
            "non-finite Bellman residual; rejecting the update "
            f"(targets finite: {np.all(np.isfinite(targets))}, "
            f"q finite: {np.all(np.isfinite(picked))})")
    loss = float(np.mean(residual ** 2))
    dq = np.zeros_like(q)
    dq[np.arange(len(transitions)), actions] = \
        -2.0 * residual / len(transitions)
    return loss, model.backward(cache, dq)


def q_update(transitions: list, model, target_model, gamma: float,
             optimizer, double_q: bool = False) -> float:
    """One gradient step on the online model; the target model only
    supplies bootstrap values and is never modified."""
    if not transitions:
        raise ValueError("q_update needs a non-empty batch")
    targets = q_targets(transitions, target_model, gamma,
                        double_q=double_q, online_model=model)
    loss, grads = q_loss_gradients(transitions, model, targets)
    optimizer.step(model.params(), grads)
    return loss


def epsilon_at(iteration: int, total_iterations: int, start: float,
               end: float) -> float:
    """Linear anneal from start to end over the first half of training,
    constant afterwards."""
    half = max(1, total_iterations // 2)
    frac = min(1.0, iteration / half)
    return start + (end - start) * frac


def choose_action(q_values, rng, exploration: str = "epsilon",
                  epsilon: float = 0.0, temperature: float = 1.0) -> int:
    """Pick an action from Q-values. Epsilon-greedy takes the argmax
    (lowest index on ties) outside the epsilon branch; Boltzmann samples
    proportionally to exp(Q / temperature)."""
    q_values = np.asarray(q_values, dtype=np.float64)
    if exploration == "epsilon":
        if epsilon > 0.0 and rng.random() < epsilon:
            return int(rng.integers(len(q_values)))
        return int(np.argmax(q_values))
    if exploration == "boltzmann":
        if temperature <= 0.0:
            raise ValueError("temperature must be positive")
        return int(rng.choice(len(q_values),
                              p=nn.softmax(q_values / temperature)))
    raise ValueError(f"unknown exploration strategy {exploration!r}")


@dataclass
class RlState:
    """Live episode bookkeeping between actions."""

    step: int
    prev_action: int
    q_snapshot: TrunkSnapshot
    r_snapshot: TrunkSnapshot
    history: list


def _episode_start(qnet: MelodyQNetwork, reward: RewardModel) -> RlState:
    return RlState(0, MELODY_NO_EVENT, qnet.start(), reward.start(), [])


def tune(primed: BiaxialParams, cfg, rng):
    """Refine the primed model's melody policy with Q-learning.

    Per iteration: act once in the melody environment (blended reward =
    log p under the frozen primed model + rule reward / c), store the
    transition, and once the replay holds a full batch take one
    q_update step followed by one target_sync. Returns the tuned
    Q-network and a trace with one (iteration, reward, log_p, rule
    reward) row per iteration.
    """
    cfg.validate()
    reward_model = RewardModel(primed.copy(), cfg.note_low, cfg.n_notes)
    qnet = MelodyQNetwork.from_primed(primed, cfg.note_low, cfg.n_notes)
    target = qnet.copy()
    optimizer = nn.Adadelta(rho=cfg.adadelta_rho, eps=cfg.adadelta_eps,
                            lr=cfg.learning_rate)
    theory_cfg = TheoryConfig.from_run_config(cfg)
    buffer = ReplayBuffer(cfg.replay_capacity)
    state = _episode_start(qnet, reward_model)
    trace = []
    for it in range(cfg.rl_iterations):
        q_row, q_cells = qnet.act(state.q_snapshot)
        epsilon = epsilon_at(it, cfg.rl_iterations, cfg.epsilon_start,
                             cfg.epsilon_end)
        action = choose_action(q_row, rng, exploration=cfg.exploration,
                               epsilon=epsilon,
                               temperature=cfg.temperature)
        log_dist, r_cells = reward_model.log_dist(state.r_snapshot)
        breakdown = theory_reward(state.history, action, theory_cfg)
        reward = float(log_dist[action]) + breakdown.total / cfg.c_weight
        terminal = state.step == cfg.episode_len - 1

        col = action_column(action, state.q_snapshot.sounding,
                            cfg.note_low, cfg.n_notes)
        sounding = next_sounding(action, state.q_snapshot.sounding)
        q_next = TrunkSnapshot(q_cells, col, state.step, sounding)
        r_next = TrunkSnapshot(r_cells, col, state.step, sounding)
        buffer.append(Transition(state.q_snapshot, action, reward,
                                 q_next, terminal))
        trace.append((it, reward, float(log_dist[action]),
                      breakdown.total))

        if terminal:
            state = _episode_start(qnet, reward_model)
        else:
            state = RlState(state.step + 1, action, q_next, r_next,
                            state.history + [action])

        if len(buffer) >= cfg.rl_batch_size:
            q_update(buffer.sample(cfg.rl_batch_size, rng), qnet, target,
                     cfg.gamma, optimizer, double_q=cfg.double_q)
            target_sync(qnet.params(), target.params(), cfg.eta)
    return qnet, trace


def rollout(qnet: MelodyQNetwork, cfg, rng, greedy: bool = True) -> list:
    """Play one episode from the tuned policy; greedy takes argmax Q,
    otherwise actions are Boltzmann-sampled at cfg.temperature."""
    snapshot = qnet.start()
    actions = []
    for step in range(cfg.episode_len):
        q_row, cells = qnet.act(snapshot)
        if greedy:
            action = int(np.argmax(q_row))
        else:
            action = choose_action(q_row, rng, exploration="boltzmann",
                                   temperature=cfg.temperature)
        col = action_column(action, snapshot.sounding, cfg.note_low,
                            cfg.n_notes)
        snapshot = TrunkSnapshot(cells, col, step,
                                 next_sounding(action, snapshot.sounding))
        actions.append(action)
    return actions


def sample_primed_melody(reward_model: RewardModel, cfg, rng) -> list:
    """Draw one episode-length melody from the primed model's own
    action distribution (categorical at each step)."""
    snapshot = reward_model.start()
    actions = []
    for step in range(cfg.episode_len):
        log_dist, cells = reward_model.log_dist(snapshot)
        action = int(rng.choice(MELODY_ACTIONS, p=np.exp(log_dist)))
        col = action_column(action, snapshot.sounding, cfg.note_low,
                            cfg.n_notes)
        snapshot = TrunkSnapshot(cells, col, step,
                                 next_sounding(action, snapshot.sounding))
        actions.append(action)
    return actions
