"""Reader and writer for multi-agent `.dpomdp` model files.

The format is the Cassandra POMDP syntax extended with one action/observation
token per agent: header lines (`agents:`, `discount:`, `values:`, `states:`,
`actions:`, `observations:`, `start:`) followed by `T:`/`O:`/`R:` entries
with `*` wildcards and `uniform`/`identity` matrix keywords. `#` starts a
comment. Entries assign in file order; unspecified probabilities are 0.
"""
from __future__ import annotations

import io
from typing import IO, Sequence

import numpy as np

from .model import DecPomdp, PROB_ATOL, _strides

__all__ = ["DpomdpParseError", "parse_dpomdp", "format_dpomdp"]

_DENSE_CAP = 80_000_000  # scratch floats; guards pathological table sizes


class DpomdpParseError(ValueError):
    def __init__(self, message: str, lineno: int | None = None):
        where = f"line {lineno}: " if lineno is not None else ""
        super().__init__(f"{where}{message}")
        self.lineno = lineno


def _tokenize(text: str) -> list[tuple[int, list[str]]]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0].strip()
        if body:
            out.append((lineno, body.split()))
    return out


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def _split_colons(tokens: list[str]) -> list[list[str]]:
    """Group tokens between ':' separators; attached colons count too."""
    parts: list[list[str]] = []
    cur: list[str] = []
    for t in tokens:
        while t.startswith(":") and t != ":":
            parts.append(cur)
            cur = []
            t = t[1:]
        if t == ":":
            parts.append(cur)
            cur = []
            continue
        if t.endswith(":"):
            cur.append(t[:-1])
            parts.append(cur)
            cur = []
        else:
            cur.append(t)
    parts.append(cur)
    return [p for p in parts if p]


class _Parser:
    def __init__(self, text: str, name: str):
        self.lines = _tokenize(text)
        self.pos = 0
        self.name = name
        self.n_agents: int | None = None
        self.discount = 1.0
        self.states: list[str] | None = None
        self.actions: list[list[str]] | None = None
        self.obs: list[list[str]] | None = None
        self.b0 = None
        self.T = None  # (X, U, X)
        self.O = None  # (U, X, Z)
        self.r_lines: list[tuple] = []

    # -- low-level helpers ---------------------------------------------------
    def error(self, msg: str) -> DpomdpParseError:
        lineno = self.lines[min(self.pos - 1, len(self.lines) - 1)][0] if self.lines else None
        return DpomdpParseError(msg, lineno)

    def next_line(self) -> list[str]:
        if self.pos >= len(self.lines):
            raise DpomdpParseError("unexpected end of file")
        _, toks = self.lines[self.pos]
        self.pos += 1
        return toks

    @staticmethod
    def _labels(tokens: list[str], prefix: str) -> list[str]:
        if len(tokens) == 1 and tokens[0].isdigit():
            return [f"{prefix}{i}" for i in range(int(tokens[0]))]
        return list(tokens)

    def _index(self, token: str, labels: Sequence[str], what: str) -> list[int]:
        if token == "*":
            return list(range(len(labels)))
        if token in labels:
            return [list(labels).index(token)]
        try:
            i = int(token)
        except ValueError:
            raise self.error(f"unknown {what} {token!r}") from None
        if not 0 <= i < len(labels):
            raise self.error(f"{what} index {i} out of range")
        return [i]

    def _joint(self, tokens: list[str], per_agent: list[list[str]], what: str) -> np.ndarray:
        """Flat joint indices matched by one joint action/observation group."""
        counts = [len(lab) for lab in per_agent]
        if len(tokens) == 1 and tokens[0] == "*":
            sets = [list(range(c)) for c in counts]
        else:
            if len(tokens) != self.n_agents:
                raise self.error(
                    f"expected {self.n_agents} {what} tokens (or lone '*'), got {len(tokens)}")
            sets = [self._index(t, per_agent[i], what) for i, t in enumerate(tokens)]
        strides = _strides(counts)
        flat = np.zeros(1, dtype=np.int64)
        for s, st in zip(sets, strides):
            flat = (flat[:, None] + np.asarray(s, dtype=np.int64)[None, :] * st).ravel()
        return flat

    def _floats(self, tokens: list[str], expect: int | None = None) -> np.ndarray:
        try:
            vals = np.array([float(t) for t in tokens])
        except ValueError:
            raise self.error(f"expected numbers, got {tokens!r}") from None
        if expect is not None and len(vals) != expect:
            raise self.error(f"expected {expect} values, got {len(vals)}")
        return vals

    @staticmethod
    def _pull_number(part: list[str], width: int) -> tuple[list[str], float | None]:
        """Split a trailing probability off a token group one longer than width."""
        if len(part) == width + 1 and _is_number(part[-1]):
            return part[:-1], float(part[-1])
        return part, None

    # -- driver ----------------------------------------------------------------
    def run(self) -> DecPomdp:
        while self.pos < len(self.lines):
            toks = self.next_line()
            head = toks[0]
            key = head[:-1] if head.endswith(":") else head
            rest = toks[1:]
            if rest and rest[0] == ":":
                rest = rest[1:]
            if key == "agents":
                self.n_agents = int(rest[0])
            elif key == "discount":
                self.discount = float(rest[0])
            elif key == "values":
                if rest != ["reward"]:
                    raise self.error("only 'values: reward' is supported")
            elif key == "states":
                self.states = self._labels(rest if rest else self.next_line(), "s")
            elif key == "actions":
                self._need_agents()
                if rest:
                    raise self.error("'actions:' takes one label line per agent")
                self.actions = [self._labels(self.next_line(), "a")
                                for _ in range(self.n_agents)]
            elif key == "observations":
                self._need_agents()
                if rest:
                    raise self.error("'observations:' takes one label line per agent")
                self.obs = [self._labels(self.next_line(), "o")
                            for _ in range(self.n_agents)]
            elif key == "start":
                self._parse_start(rest)
            elif key == "T":
                self._ensure_tables()
                self._parse_t(rest)
            elif key == "O":
                self._ensure_tables()
                self._parse_o(rest)
            elif key == "R":
                self._ensure_tables()
                self._parse_r(rest)
            else:
                raise self.error(f"cannot parse line starting with {head!r}")
        return self._finalize()

    def _need_agents(self):
        if self.n_agents is None:
            raise self.error("'agents:' must come before action/observation labels")

    def _ensure_tables(self):
        if self.T is not None:
            return
        if None in (self.n_agents, self.states, self.actions, self.obs):
            raise self.error("T/O/R lines before the header is complete")
        nX = len(self.states)
        nU = int(np.prod([len(a) for a in self.actions]))
        nZ = int(np.prod([len(z) for z in self.obs]))
        if nX * nX * nU > _DENSE_CAP or nU * nX * nZ > _DENSE_CAP:
            raise self.error("model tables too large for the dense parser scratch")
        self.T = np.zeros((nX, nU, nX))
        self.O = np.zeros((nU, nX, nZ))

    # -- sections ----------------------------------------------------------------
    def _parse_start(self, rest: list[str]):
        if self.states is None:
            raise self.error("'start:' before 'states:'")
        nX = len(self.states)
        toks = rest if rest else self.next_line()
        if toks == ["uniform"]:
            self.b0 = np.full(nX, 1.0 / nX)
        elif len(toks) == 1 and not _is_number(toks[0]):
            idx = self._index(toks[0], self.states, "state")
            if len(idx) != 1:
                raise self.error("start state wildcard not supported")
            self.b0 = np.zeros(nX)
            self.b0[idx[0]] = 1.0
        elif len(toks) == 1 and nX > 1 and "." not in toks[0]:
            self.b0 = np.zeros(nX)
            self.b0[int(toks[0])] = 1.0
        else:
            self.b0 = self._floats(toks, nX)

    def _parse_t(self, rest: list[str]):
        parts = _split_colons(rest)
        us = self._joint(parts[0], self.actions, "action")
        nX = len(self.states)
        if len(parts) == 1:
            nxt = self.next_line()
            if nxt == ["uniform"]:
                self.T[:, us, :] = 1.0 / nX
            elif nxt == ["identity"]:
                self.T[:, us, :] = 0.0
                for x in range(nX):
                    self.T[x, us, x] = 1.0
            else:
                for x in range(nX):
                    row = self._floats(nxt if x == 0 else self.next_line(), nX)
                    self.T[x, us, :] = row
            return
        xs = self._index(parts[1][0], self.states, "state")
        if len(parts) == 2:
            nxt = self.next_line()
            if nxt == ["uniform"]:
                self.T[np.ix_(xs, us)] = 1.0 / nX
            else:
                self.T[np.ix_(xs, us)] = self._floats(nxt, nX)
            return
        ytoks, prob = self._pull_number(parts[2], 1)
        ys = self._index(ytoks[0], self.states, "state")
        if prob is None:
            prob = float(parts[3][0]) if len(parts) >= 4 else float(self.next_line()[0])
        self.T[np.ix_(xs, us, ys)] = prob

    def _parse_o(self, rest: list[str]):
        parts = _split_colons(rest)
        us = self._joint(parts[0], self.actions, "action")
        nX, nZ = len(self.states), self.O.shape[2]
        if len(parts) == 1:
            nxt = self.next_line()
            if nxt == ["uniform"]:
                self.O[us, :, :] = 1.0 / nZ
            else:
                for y in range(nX):
                    row = self._floats(nxt if y == 0 else self.next_line(), nZ)
                    self.O[us, y, :] = row
            return
        ys = self._index(parts[1][0], self.states, "state")
        if len(parts) == 2:
            nxt = self.next_line()
            if nxt == ["uniform"]:
                self.O[np.ix_(us, ys)] = 1.0 / nZ
            else:
                self.O[np.ix_(us, ys)] = self._floats(nxt, nZ)
            return
        ztoks, prob = self._pull_number(parts[2], self.n_agents)
        zs = self._joint(ztoks, self.obs, "observation")
        if prob is None:
            prob = float(parts[3][0]) if len(parts) >= 4 else float(self.next_line()[0])
        self.O[np.ix_(us, ys, zs)] = prob

    def _parse_r(self, rest: list[str]):
        parts = _split_colons(rest)
        if len(parts) < 4:
            raise self.error("R lines need '<u> : <x> : <y> : <z> [: value]'")
        us = self._joint(parts[0], self.actions, "action")
        xs = self._index(parts[1][0], self.states, "state")
        ys = self._index(parts[2][0], self.states, "state")
        ztoks, val = self._pull_number(parts[3], self.n_agents)
        zs = self._joint(ztoks, self.obs, "observation")
        if val is None:
            val = float(parts[4][0]) if len(parts) >= 5 else float(self.next_line()[0])
        self.r_lines.append((set(map(int, us)), set(xs), set(ys),
                             set(map(int, zs)), float(val)))

    # -- assembly ----------------------------------------------------------------
    def _finalize(self) -> DecPomdp:
        if self.T is None:
            raise DpomdpParseError("file has no T/O entries")
        if self.b0 is None:
            raise DpomdpParseError("file has no 'start:' distribution")
        nX = len(self.states)
        nU, nZ = self.O.shape[0], self.O.shape[2]
        t_sums = self.T.sum(axis=2)
        bad = np.argwhere(np.abs(t_sums - 1.0) > PROB_ATOL)
        if len(bad):
            x, u = map(int, bad[0])
            raise DpomdpParseError(
                f"non-stochastic transition row: T sums to {t_sums[x, u]:.6g} "
                f"at (x={self.states[x]}, u={u})")
        o_sums = self.O.sum(axis=2)
        bad = np.argwhere(np.abs(o_sums - 1.0) > PROB_ATOL)
        if len(bad):
            u, y = map(int, bad[0])
            raise DpomdpParseError(
                f"non-stochastic observation row: O sums to {o_sums[u, y]:.6g} "
                f"at (u={u}, y={self.states[y]})")
        if abs(self.b0.sum() - 1.0) > PROB_ATOL:
            raise DpomdpParseError(f"start distribution sums to {self.b0.sum():.6g}")

        # Compose p(y, z | x, u); expectation-fold R(u,x,y,z) into r(x, u).
        offsets = [0]
        ys_all, zs_all, ps_all = [], [], []
        reward = np.zeros((nX, nU))
        for x in range(nX):
            for u in range(nU):
                row_y, row_z, row_p = [], [], []
                for y in np.nonzero(self.T[x, u] > 0)[0]:
                    zs = np.nonzero(self.O[u, y] > 0)[0]
                    row_y.append(np.full(len(zs), y, dtype=np.int32))
                    row_z.append(zs.astype(np.int32))
                    row_p.append(self.T[x, u, y] * self.O[u, y, zs])
                row_y = np.concatenate(row_y) if row_y else np.zeros(0, np.int32)
                row_z = np.concatenate(row_z) if row_z else np.zeros(0, np.int32)
                row_p = np.concatenate(row_p) if row_p else np.zeros(0)
                vals = np.zeros(len(row_p))
                for u_set, x_set, y_set, z_set, v in self.r_lines:
                    if u in u_set and x in x_set:
                        m = np.fromiter(((int(yy) in y_set and int(zz) in z_set)
                                         for yy, zz in zip(row_y, row_z)),
                                        dtype=bool, count=len(row_p))
                        vals[m] = v
                reward[x, u] = float(np.dot(row_p, vals))
                ys_all.append(row_y)
                zs_all.append(row_z)
                ps_all.append(row_p)
                offsets.append(offsets[-1] + len(row_p))

        return DecPomdp(
            n_agents=self.n_agents,
            state_labels=tuple(self.states),
            action_labels=tuple(tuple(a) for a in self.actions),
            obs_labels=tuple(tuple(z) for z in self.obs),
            gamma=self.discount,
            default_horizon=10,
            b0=self.b0,
            reward=reward,
            trans_offsets=np.asarray(offsets, dtype=np.int64),
            trans_y=np.concatenate(ys_all),
            trans_z=np.concatenate(zs_all),
            trans_p=np.concatenate(ps_all),
            name=self.name,
        )


def parse_dpomdp(source: str | IO[str], name: str = "dpomdp") -> DecPomdp:
    """Parse a `.dpomdp` document from text or a readable character stream."""
    text = source.read() if hasattr(source, "read") else source
    return _Parser(text, name).run()


def format_dpomdp(model: DecPomdp, comment: str | None = None) -> str:
    """Render a model back to `.dpomdp` text; reparsing yields equal tables.

    Requires the joint kernel to factor as p(y,z|x,u) = T(y|x,u) * O(z|u,y),
    which holds for every parsed or built-in model.
    """
    nX, nU, nZ = model.n_states, model.n_joint_actions, model.n_joint_obs
    T = np.zeros((nX, nU, nX))
    O = np.full((nU, nX, nZ), np.nan)
    for x in range(nX):
        for u in range(nU):
            ys, zs, ps = model.row(x, u)
            np.add.at(T[x, u], ys, ps)
            for y in np.unique(ys):
                m = ys == y
                o_row = np.zeros(nZ)
                o_row[zs[m]] = ps[m] / T[x, u, y]
                if np.isnan(O[u, y]).all():
                    O[u, y] = o_row
                elif not np.allclose(O[u, y], o_row, atol=1e-12):
                    raise ValueError("joint kernel does not factor into T and O")
    O = np.where(np.isnan(O), 0.0, O)
    dead = np.nonzero(O.sum(axis=2) == 0)  # (u, y) never reached: any row works
    O[dead[0], dead[1], 0] = 1.0

    def fmt(v: float) -> str:
        return np.format_float_positional(v, unique=True, trim="0")

    lines = []
    if comment:
        lines += [f"# {c}" for c in comment.splitlines()]
    lines += [
        f"agents: {model.n_agents}",
        f"discount: {fmt(model.gamma)}",
        "values: reward",
        "states: " + " ".join(model.state_labels),
        "actions:",
        *(" ".join(a) for a in model.action_labels),
        "observations:",
        *(" ".join(z) for z in model.obs_labels),
        "start:",
        " ".join(fmt(p) for p in model.b0),
    ]
    for u in range(nU):
        utoks = " ".join(model.action_labels[i][c]
                         for i, c in enumerate(model.action_vector(u)))
        for x in range(nX):
            for y in np.nonzero(T[x, u])[0]:
                lines.append(f"T: {utoks} : {model.state_labels[x]} : "
                             f"{model.state_labels[y]} : {fmt(T[x, u, y])}")
        for y in range(nX):
            for z in np.nonzero(O[u, y])[0]:
                ztoks = " ".join(model.obs_labels[i][c]
                                 for i, c in enumerate(model.obs_vector(int(z))))
                lines.append(f"O: {utoks} : {model.state_labels[y]} : "
                             f"{ztoks} : {fmt(O[u, y, z])}")
        for x in range(nX):
            if model.reward[x, u] != 0.0:
                lines.append(f"R: {utoks} : {model.state_labels[x]} : * : * : "
                             f"{fmt(model.reward[x, u])}")
    return "\n".join(lines) + "\n"
