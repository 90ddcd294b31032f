"""Rule DSL, fuzzy grounding over scenes, and conjunction-weight learning.

Rules look like::

    # leak on the ground
    OilArea(A) <- SuspectedArea(A) & Ground(B) & On(A,B).

One statement per rule, '.' terminated, '#' starts a comment.  Body
predicates come from a fixed registry — unary SuspectedArea / Ground /
OilStorageDevice (matched against detection classes) and binary On / Around
(read from the relation classifier's above / nearby probabilities).  The
head may use any predicate name; its variable must occur in the body.  A
rule may carry its conjunction weights inline, written before the period::

    OilArea(A) <- SuspectedArea(A) & Ground(B) & On(A,B) : [0.645, 0.181, 0.162, 0.012].

The fuzzy connectives are: not x = 1 - x, or = max, and = the clamped
affine form  clamp(sum_i b_i x_i + c, 0, 1)  with one weight per premise
plus a bias.  A rule meets a scene existentially: every assignment of scene
objects to the rule's variables is scored and the best one wins.
Assignments that send a positive unary premise to an object of the wrong
class are discarded (such a premise is crisply false), so a rule whose
subject class is absent from the scene scores exactly 0 rather than its
bare bias.

Weight learning is joint gradient descent on binary cross-entropy between
the ruleset score and the scene leak label, with subgradients routed
through the max picks and zeroed outside the clamp range.
"""

from __future__ import annotations

import itertools
import json
import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .scene import ClassLabel, DetectedObject, Scene

# Body predicates and their arities; unary ones assert a detection class.
PREDICATES: dict[str, int] = {
    "SuspectedArea": 1,
    "Ground": 1,
    "OilStorageDevice": 1,
    "On": 2,
    "Around": 2,
}
_PRED_CLASS = {
    "SuspectedArea": ClassLabel.SUSPECTED_AREA,
    "Ground": ClassLabel.GROUND,
    "OilStorageDevice": ClassLabel.OIL_STORAGE_DEVICE,
}
# Index into the relation classifier's (above, nearby, other) probabilities.
_PRED_RELATION = {"On": 0, "Around": 1}

MAX_BODY_ATOMS = 16
_P_EPS = 1e-7  # cross-entropy probability clip

#: Assignment of rule variables to object ids within one scene.
GroundingContext = dict[str, int]


@dataclass(frozen=True)
class Atom:
    predicate: str
    args: tuple[str, ...]
    negated: bool = False

    def __str__(self) -> str:
        bang = "!" if self.negated else ""
        return f"{bang}{self.predicate}({','.join(self.args)})"


@dataclass(frozen=True)
class RuleAST:
    head: Atom
    body: tuple[Atom, ...]

    def __post_init__(self):
        if len(self.head.args) != 1 or self.head.negated:
            raise DataError("rule head must be a positive unary atom")
        if not (1 <= len(self.body) <= MAX_BODY_ATOMS):
            raise DataError(f"rule body must have 1..{MAX_BODY_ATOMS} atoms")
        body_vars = {v for atom in self.body for v in atom.args}
        if self.head.args[0] not in body_vars:
            raise DataError(
                f"head variable {self.head.args[0]} does not appear in the body"
            )

    def variables(self) -> tuple[str, ...]:
        """Distinct variables in first-occurrence order, head first."""
        seen: list[str] = []
        for atom in (self.head, *self.body):
            for v in atom.args:
                if v not in seen:
                    seen.append(v)
        return tuple(seen)

    def __str__(self) -> str:
        return f"{self.head} <- {' & '.join(str(a) for a in self.body)}"


@dataclass(frozen=True)
class RuleParams:
    """Conjunction weights, one per body atom, plus the bias."""

    weights: tuple[float, ...]
    bias: float

    def __post_init__(self):
        if not self.weights:
            raise DataError("RuleParams needs at least one weight")
        vals = (*self.weights, self.bias)
        if not all(math.isfinite(v) for v in vals):
            raise DataError("RuleParams values must be finite")

    def vector(self) -> np.ndarray:
        """Flat [b1..bn, c] layout."""
        return np.array([*self.weights, self.bias], dtype=np.float64)

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "RuleParams":
        v = [float(x) for x in vec]
        return cls(weights=tuple(v[:-1]), bias=v[-1])


# ---------------------------------------------------------------------------
# Fuzzy connectives
# ---------------------------------------------------------------------------

def _unit(x: float) -> float:
    return min(max(float(x), 0.0), 1.0)


def fuzzy_not(x: float) -> float:
    return 1.0 - _unit(x)


def fuzzy_or(xs) -> float:
    vals = [_unit(x) for x in xs]
    if not vals:
        raise DataError("fuzzy_or needs at least one input")
    return max(vals)


def fuzzy_and(xs, params: RuleParams) -> float:
    vals = [_unit(x) for x in xs]
    if len(vals) != len(params.weights):
        raise DataError(
            f"fuzzy_and arity mismatch: {len(vals)} inputs, "
            f"{len(params.weights)} weights"
        )
    z = sum(b * x for b, x in zip(params.weights, vals)) + params.bias
    return _unit(z)


# ---------------------------------------------------------------------------
# DSL parsing and printing
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<comment>\#[^\n]*)
  | (?P<arrow><-)
  | (?P<number>[-+]?(\d+\.\d*|\.\d+|\d+)([eE][-+]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<punct>[()&,.!:\[\]])
    """,
    re.VERBOSE,
)

_VAR_RE = re.compile(r"[A-Z][A-Za-z0-9_]*$")


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    line, col = 1, 1
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise DataError(f"line {line}, column {col}: unexpected character {text[pos]!r}")
        kind = m.lastgroup
        lexeme = m.group()
        if kind not in ("ws", "comment"):
            tokens.append(_Token(kind, lexeme, line, col))
        newlines = lexeme.count("\n")
        if newlines:
            line += newlines
            col = len(lexeme) - lexeme.rfind("\n")
        else:
            col += len(lexeme)
        pos = m.end()
    tokens.append(_Token("eof", "", line, col))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def _fail(self, msg: str):
        t = self.peek()
        raise DataError(f"line {t.line}, column {t.col}: {msg}")

    def expect(self, kind: str, text: str | None = None) -> _Token:
        t = self.peek()
        if t.kind != kind or (text is not None and t.text != text):
            want = text if text is not None else kind
            got = t.text if t.kind != "eof" else "end of input"
            self._fail(f"expected {want!r}, got {got!r}")
        self.i += 1
        return t

    def parse(self) -> list[tuple[RuleAST, RuleParams | None]]:
        rules: list[tuple[RuleAST, RuleParams | None]] = []
        while self.peek().kind != "eof":
            rules.append(self.rule())
        return rules

    def rule(self) -> tuple[RuleAST, RuleParams | None]:
        head = self.atom(is_head=True)
        self.expect("arrow")
        body = [self.atom()]
        while self.peek().text == "&":
            self.i += 1
            body.append(self.atom())
        params: RuleParams | None = None
        if self.peek().text == ":":
            self.i += 1
            params = self.params_vector()
        self.expect("punct", ".")
        try:
            ast = RuleAST(head, tuple(body))
        except DataError as e:
            self._fail(str(e))
        if params is not None and len(params.weights) != len(body):
            self._fail(
                f"weight vector has {len(params.weights) + 1} entries, rule "
                f"needs {len(body) + 1} (one per premise plus bias)"
            )
        return ast, params

    def atom(self, is_head: bool = False) -> Atom:
        negated = False
        if self.peek().text == "!":
            if is_head:
                self._fail("rule head cannot be negated")
            negated = True
            self.i += 1
        name_tok = self.expect("ident")
        if not is_head and name_tok.text not in PREDICATES:
            raise DataError(
                f"line {name_tok.line}, column {name_tok.col}: unknown predicate "
                f"{name_tok.text!r} (known: {', '.join(sorted(PREDICATES))})"
            )
        self.expect("punct", "(")
        args = [self.variable()]
        if self.peek().text == ",":
            self.i += 1
            args.append(self.variable())
        self.expect("punct", ")")
        if not is_head:
            arity = PREDICATES[name_tok.text]
            if len(args) != arity:
                raise DataError(
                    f"line {name_tok.line}, column {name_tok.col}: predicate "
                    f"{name_tok.text} takes {arity} argument(s), got {len(args)}"
                )
        return Atom(name_tok.text, tuple(args), negated)

    def variable(self) -> str:
        t = self.expect("ident")
        if not _VAR_RE.match(t.text):
            raise DataError(
                f"line {t.line}, column {t.col}: variable must be an uppercase "
                f"identifier, got {t.text!r}"
            )
        return t.text

    def params_vector(self) -> RuleParams:
        self.expect("punct", "[")
        nums = [float(self.expect("number").text)]
        while self.peek().text == ",":
            self.i += 1
            nums.append(float(self.expect("number").text))
        self.expect("punct", "]")
        if len(nums) < 2:
            self._fail("weight vector needs at least one weight and a bias")
        return RuleParams(weights=tuple(nums[:-1]), bias=nums[-1])


def parse_rules(text: str) -> list[tuple[RuleAST, RuleParams | None]]:
    """Parse a rules file into (AST, optional inline weights) pairs."""
    return _Parser(text).parse()


def print_rules(rules: list[tuple[RuleAST, RuleParams | None]]) -> str:
    """Canonical text form; parse_rules(print_rules(r)) == r."""
    lines = []
    for ast, params in rules:
        stmt = str(ast)
        if params is not None:
            vec = ", ".join(repr(v) for v in (*params.weights, params.bias))
            stmt += f" : [{vec}]"
        lines.append(stmt + ".")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Grounding and inference
# ---------------------------------------------------------------------------

def atom_probability(
    atom: Atom,
    ctx: GroundingContext,
    scene: Scene,
    pair_probs,
) -> float:
    """Fuzzy truth of one grounded atom.

    Unary atoms pass through the bound object's confidence when its class
    matches the predicate and are 0 otherwise; On/Around read the above /
    nearby probability of the ordered pair from `pair_probs(subject,
    reference)`.  Negation wraps the result in fuzzy_not.
    """
    try:
        objs = [scene.object_by_id(ctx[v]) for v in atom.args]
    except KeyError as e:
        raise DataError(f"unbound variable {e.args[0]} in atom {atom}") from None
    if atom.predicate in _PRED_CLASS:
        obj = objs[0]
        p = obj.confidence if obj.label is _PRED_CLASS[atom.predicate] else 0.0
    else:
        probs = pair_probs(objs[0], objs[1])
        p = _unit(probs[_PRED_RELATION[atom.predicate]])
    return fuzzy_not(p) if atom.negated else p


def _admissible(atom: Atom, obj: DetectedObject) -> bool:
    # A positive unary premise on the wrong class is crisply false; bindings
    # containing one can never describe the situation the rule talks about.
    if atom.negated or atom.predicate not in _PRED_CLASS:
        return True
    return obj.label is _PRED_CLASS[atom.predicate]


def ground_rule(
    rule: RuleAST, scene: Scene, pair_probs
) -> tuple[np.ndarray, list[GroundingContext]]:
    """All admissible bindings and their per-atom truth matrix.

    Returns (X, bindings) where X[i, j] is the probability of body atom j
    under bindings[i].  Variables range over every object in the scene;
    bindings failing the positive-unary class check are dropped.
    """
    variables = rule.variables()
    objects = scene.objects
    rows: list[list[float]] = []
    bindings: list[GroundingContext] = []
    if not objects:
        return np.zeros((0, len(rule.body))), bindings
    # Per-variable candidate filter from positive unary atoms.
    candidates: list[list[DetectedObject]] = []
    for v in variables:
        pool = list(objects)
        for atom in rule.body:
            if len(atom.args) == 1 and atom.args[0] == v:
                pool = [o for o in pool if _admissible(atom, o)]
        candidates.append(pool)
    if any(not pool for pool in candidates):
        return np.zeros((0, len(rule.body))), bindings
    for combo in itertools.product(*candidates):
        ctx = {v: obj.id for v, obj in zip(variables, combo)}
        rows.append([atom_probability(a, ctx, scene, pair_probs) for a in rule.body])
        bindings.append(ctx)
    return np.array(rows, dtype=np.float64), bindings


def evaluate_rule(
    rule: RuleAST,
    params: RuleParams,
    scene: Scene,
    pair_probs,
) -> tuple[float, GroundingContext | None]:
    """Best fuzzy conjunction over all admissible bindings, with the winner.

    No admissible binding (the subject class is absent, or the scene is
    empty) scores 0 with no context.
    """
    x, bindings = ground_rule(rule, scene, pair_probs)
    if x.shape[0] == 0:
        return 0.0, None
    if x.shape[1] != len(params.weights):
        raise DataError(
            f"rule has {x.shape[1]} premises but params carry "
            f"{len(params.weights)} weights"
        )
    z = x @ np.asarray(params.weights) + params.bias
    y = np.clip(z, 0.0, 1.0)
    i = int(np.argmax(y))
    return float(y[i]), bindings[i]


def evaluate_rules(
    rules: list[RuleAST],
    params: list[RuleParams],
    scene: Scene,
    pair_probs,
) -> list[tuple[float, GroundingContext | None]]:
    if len(rules) != len(params):
        raise DataError("one RuleParams per rule required")
    return [evaluate_rule(r, p, scene, pair_probs) for r, p in zip(rules, params)]


def evaluate_ruleset(
    rules: list[RuleAST],
    params: list[RuleParams],
    scene: Scene,
    pair_probs,
) -> float:
    """Scene leak probability: fuzzy_or over the individual rule scores."""
    if not rules:
        raise DataError("ruleset must contain at least one rule")
    return max(s for s, _ in evaluate_rules(rules, params, scene, pair_probs))


# ---------------------------------------------------------------------------
# Weight learning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RuleTrainConfig:
    lr: float = 0.1
    steps: int = 500
    seed: int = 0
    init_jitter: float = 0.01

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.init_jitter < 0:
            raise ConfigError("init_jitter must be >= 0")


@dataclass(frozen=True)
class RuleTrainStats:
    step: int
    loss: float
    train_acc: float


def _ground_corpus(rules, scenes, pair_probs_factory):
    out = []
    for scene in scenes:
        fn = pair_probs_factory(scene)
        out.append([ground_rule(rule, scene, fn) for rule in rules])
    return out


def _loss_and_grad_grounded(params_list, groundings, labels):
    n_scenes = len(labels)
    vecs = [p.vector() for p in params_list]
    grads = [np.zeros_like(v) for v in vecs]
    loss = 0.0
    correct = 0
    for scene_i, label in enumerate(labels):
        scores = np.zeros(len(vecs))
        winners: list[int | None] = []
        zs: list[float] = []
        for r, (x, _bindings) in enumerate(groundings[scene_i]):
            if x.shape[0] == 0:
                winners.append(None)
                zs.append(0.0)
                continue
            z = x @ vecs[r][:-1] + vecs[r][-1]
            y = np.clip(z, 0.0, 1.0)
            i = int(np.argmax(y))
            scores[r] = y[i]
            winners.append(i)
            zs.append(float(z[i]))
        best = int(np.argmax(scores))
        p = float(scores[best])
        p_hat = min(max(p, _P_EPS), 1.0 - _P_EPS)
        y_true = 1.0 if label else 0.0
        loss += -(y_true * math.log(p_hat) + (1.0 - y_true) * math.log(1.0 - p_hat))
        correct += int((p >= 0.5) == bool(label))
        if _P_EPS <= p <= 1.0 - _P_EPS and winners[best] is not None:
            g = (-y_true / p + (1.0 - y_true) / (1.0 - p)) / n_scenes
            if 0.0 <= zs[best] <= 1.0:
                x_best = groundings[scene_i][best][0][winners[best]]
                grads[best][:-1] += g * x_best
                grads[best][-1] += g
    return loss / n_scenes, grads, correct / n_scenes


def ruleset_loss_and_grad(
    rules: list[RuleAST],
    params_list: list[RuleParams],
    scenes: list[Scene],
    pair_probs_factory,
) -> tuple[float, list[np.ndarray]]:
    """Mean cross-entropy of the ruleset on labeled scenes and its gradient.

    pair_probs_factory maps a scene to its (subject, reference) -> relation
    probabilities callable.  Gradients are exact subgradients: they follow
    the winning rule and winning binding and vanish outside the clamp
    range.  Returned per rule in the flat [b1..bn, c] layout.
    """
    labels = _require_labels(scenes)
    groundings = _ground_corpus(rules, scenes, pair_probs_factory)
    loss, grads, _acc = _loss_and_grad_grounded(params_list, groundings, labels)
    return loss, grads


def _require_labels(scenes: list[Scene]) -> list[bool]:
    labels = []
    for i, s in enumerate(scenes):
        if s.leak_label is None:
            raise DataError(f"scene {i} has no leak label")
        labels.append(s.leak_label)
    return labels


def init_rule_params(
    rules: list[RuleAST], seed: int, jitter: float = 0.01
) -> list[RuleParams]:
    """Near-uniform simplex start: weights about 0.8/n each, bias about 0.1."""
    rng = np.random.default_rng(seed)
    out = []
    for rule in rules:
        n = len(rule.body)
        w = 0.8 / n + jitter * rng.standard_normal(n)
        c = 0.1 + jitter * float(rng.standard_normal())
        out.append(RuleParams(weights=tuple(float(v) for v in w), bias=c))
    return out


def train_rule_params(
    rules: list[RuleAST],
    scenes: list[Scene],
    pair_probs_factory,
    cfg: RuleTrainConfig,
    init: list[RuleParams] | None = None,
) -> tuple[list[RuleParams], list[RuleTrainStats]]:
    """Jointly learn all rule weight vectors by full-batch gradient descent.

    Atom probabilities are fixed by the scenes and the relation classifier,
    so they are grounded once up front; each step only re-runs the cheap
    affine/clamp/max part.  lr = 0 reproduces the initial parameters.
    """
    if not rules:
        raise DataError("ruleset must contain at least one rule")
    labels = _require_labels(scenes)
    if len(set(labels)) < 2:
        raise DataError("training needs both leak and non-leak scenes")
    if init is not None and len(init) != len(rules):
        raise DataError("one initial RuleParams per rule required")
    params = init if init is not None else init_rule_params(rules, cfg.seed, cfg.init_jitter)
    vecs = [p.vector() for p in params]
    groundings = _ground_corpus(rules, scenes, pair_probs_factory)
    history: list[RuleTrainStats] = []
    for step in range(cfg.steps):
        current = [RuleParams.from_vector(v) for v in vecs]
        loss, grads, acc = _loss_and_grad_grounded(current, groundings, labels)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite rule-training loss at step {step}")
        for v, g in zip(vecs, grads):
            v -= cfg.lr * g
        history.append(RuleTrainStats(step=step, loss=loss, train_acc=acc))
    return [RuleParams.from_vector(v) for v in vecs], history


# ---------------------------------------------------------------------------
# Parameter files
# ---------------------------------------------------------------------------

def save_rule_params(params_list: list[RuleParams], path: str) -> None:
    """JSON mapping rule index -> {weights, bias}; floats round-trip exactly."""
    doc = {
        str(i): {"weights": list(p.weights), "bias": p.bias}
        for i, p in enumerate(params_list)
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)


def load_rule_params(path: str) -> list[RuleParams]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"corrupt rule parameter file {path}: {e}") from None
    if not isinstance(doc, dict):
        raise DataError("rule parameter file must be a JSON object")
    out: list[RuleParams] = []
    for i in range(len(doc)):
        key = str(i)
        if key not in doc:
            raise DataError(f"rule parameter file missing index {i}")
        entry = doc[key]
        try:
            out.append(
                RuleParams(
                    weights=tuple(float(w) for w in entry["weights"]),
                    bias=float(entry["bias"]),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"rule {i}: bad parameter entry: {e}") from None
    return out
