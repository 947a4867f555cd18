"""Run configuration: flat dotted keys with typed defaults.

File grammar, one entry per line::

    # comment
    [section]          # prefixes following keys with "section."
    key = value        # value type follows the default for that key
    other.key = value  # dotted keys work anywhere

Lists are comma separated. Booleans are ``true``/``false``. Unknown keys
and unparsable values raise :class:`ConfigError`.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from . import agent, attack, classify, laser, percept, scene
from .errors import ConfigError
from .textures import SIGN_CLASSES

DEFAULTS = {
    "seed": 1,
    # scenes
    "scene.classes": list(SIGN_CLASSES),
    "scene.routes": 9,
    "scene.held_out": 1,
    "scene.frames": 100,
    "scene.noise_sigma": 0.012,
    "scene.illumination_min": 0.85,
    "scene.illumination_max": 1.05,
    "scene.route_kinds": ["straight"],
    # classifiers
    "classifier.surrogate_widths": list(classify.SURROGATE_WIDTHS),
    "classifier.surrogate_seeds": [10, 11, 12],
    "classifier.victim_widths": list(classify.VICTIM_WIDTHS),
    "classifier.victim_seeds": [20, 21],
    "classifier.hidden2": 128,
    "classifier.epochs": 20,
    "classifier.batch": 64,
    "classifier.lr": 1e-3,
    "classifier.min_accuracy": 0.98,
    # perception
    "ptn.mode": "mask-mse",
    "ptn.hidden": [64, 64],
    "ptn.epochs": 200,
    "ptn.batch": 32,
    "ptn.lr": 2e-3,
    "ptn.lr_final": 2e-4,
    "ptn.tau": 0.05,
    "ptn.tau_start": 0.5,
    "ptn.grid": 64,
    "ptn.jitter": 0.25,
    # agent
    "agent.epochs": 100,
    "agent.segments_per_epoch": 32,
    "agent.n_max": agent.N_MAX,
    "agent.segment_length": agent.SEGMENT,
    "agent.hidden": [64, 64],
    "agent.init_log_std": -0.5,
    "ppo.clip": 0.2,
    "ppo.epochs": 4,
    "ppo.minibatch": 64,
    "ppo.value_coef": 0.5,
    "ppo.entropy_coef": 0.01,
    "ppo.lr": 3e-4,
    "ppo.max_grad_norm": 0.5,
    "ppo.gamma": 0.99,
    "ppo.gae_lambda": 0.95,
    "reward.r_success": 10.0,
    "reward.alpha": 0.1,
    "reward.c": [1.0, 1.0, 1.0],
    "reward.omega0": 8.0,
    "reward.r_omega": 0.05,
    "reward.r_lambda": 0.5,
    "reward.gamma1": 1.0,
    "reward.gamma2": 0.2,
    # attack and baselines
    "attack.classes": ["30", "60", "90", "STOP"],
    "attack.beta": laser.DEFAULT_BETA,
    "attack.rule": "ALL",
    "attack.mode": "mean",
    "baseline.queries": 200,
    "baseline.eot_fraction": 0.1,
    "baseline.grid": [36, 12, 31],
    "oracle.grid": [72, 24, 61],
    "oracle.stride": 5,
    # stage toggles for the pipeline command
    "stages.scenes": True,
    "stages.classifiers": True,
    "stages.ptn": True,
    "stages.agent": True,
    "stages.attack": True,
    "stages.baseline": True,
    "stages.oracle": True,
    "stages.report": True,
}


def _parse(key, text, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, list):
            items = [x.strip() for x in text.split(",") if x.strip()]
            kind = type(default[0]) if default else str
            return [kind(x) for x in items]
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return ", ".join(_format(x) for x in v)
    return str(v)


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key, text):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse(key, text, DEFAULTS[key])

    def update_lines(self, lines, source="<text>"):
        section = ""
        for n, raw in enumerate(lines, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected 'key = value'")
            k, _, v = line.partition("=")
            k = k.strip()
            self.set(f"{section}.{k}" if section else k, v)

    def dumps(self):
        """Canonical text: sorted keys, so equal settings give equal bytes."""
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def hash(self):
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]

    # typed views for the modules

    def dataset_config(self):
        return scene.DatasetConfig(
            routes=self["scene.routes"],
            held_out=self["scene.held_out"],
            frames=self["scene.frames"],
            noise_sigma=self["scene.noise_sigma"],
            illumination=(self["scene.illumination_min"], self["scene.illumination_max"]),
            route_kinds=tuple(self["scene.route_kinds"]),
        )

    def classifier_config(self):
        return classify.ClassifierConfig(
            hidden2=self["classifier.hidden2"],
            lr=self["classifier.lr"],
            epochs=self["classifier.epochs"],
            batch=self["classifier.batch"],
            min_accuracy=self["classifier.min_accuracy"],
        )

    def ptn_config(self):
        return percept.PTNConfig(
            mode=self["ptn.mode"],
            hidden=tuple(self["ptn.hidden"]),
            epochs=self["ptn.epochs"],
            batch=self["ptn.batch"],
            lr=self["ptn.lr"],
            lr_final=self["ptn.lr_final"],
            tau=self["ptn.tau"],
            tau_start=self["ptn.tau_start"],
            grid=self["ptn.grid"],
            jitter=self["ptn.jitter"],
        )

    def reward_config(self):
        return agent.RewardConfig(
            r_success=self["reward.r_success"],
            alpha=self["reward.alpha"],
            c=tuple(self["reward.c"]),
            omega0=self["reward.omega0"],
            r_omega=self["reward.r_omega"],
            r_lambda=self["reward.r_lambda"],
            gamma1=self["reward.gamma1"],
            gamma2=self["reward.gamma2"],
        )

    def ppo_config(self):
        return agent.PPOConfig(
            clip=self["ppo.clip"],
            epochs=self["ppo.epochs"],
            minibatch=self["ppo.minibatch"],
            value_coef=self["ppo.value_coef"],
            entropy_coef=self["ppo.entropy_coef"],
            lr=self["ppo.lr"],
            max_grad_norm=self["ppo.max_grad_norm"],
            gamma=self["ppo.gamma"],
            gae_lambda=self["ppo.gae_lambda"],
        )

    def agent_config(self):
        return agent.AgentConfig(
            epochs=self["agent.epochs"],
            segments_per_epoch=self["agent.segments_per_epoch"],
            n_max=self["agent.n_max"],
            segment_length=self["agent.segment_length"],
            hidden=tuple(self["agent.hidden"]),
            init_log_std=self["agent.init_log_std"],
            beta=self["attack.beta"],
            rule=self["attack.rule"],
            ppo=self.ppo_config(),
            reward=self.reward_config(),
        )

    def attack_config(self):
        return attack.AttackConfig(
            beta=self["attack.beta"],
            rule=self["attack.rule"],
            n_max=self["agent.n_max"],
            mode=self["attack.mode"],
            queries=self["baseline.queries"],
            eot_fraction=self["baseline.eot_fraction"],
            grid=tuple(self["baseline.grid"]),
            fine_grid=tuple(self["oracle.grid"]),
        )

    def validate(self):
        for lab in self["scene.classes"]:
            if lab not in SIGN_CLASSES:
                raise ConfigError(f"unknown sign class {lab!r}")
        for lab in self["attack.classes"]:
            if lab not in self["scene.classes"]:
                raise ConfigError(f"attack class {lab!r} is not among the scene classes")
        if self["attack.rule"] not in classify.SUCCESS_RULES:
            raise ConfigError(f"unknown success rule {self['attack.rule']!r}")
        if self["attack.mode"] not in ("mean", "sample"):
            raise ConfigError("attack.mode must be mean or sample")
        if self["ptn.mode"] not in ("mask-mse", "param-mse"):
            raise ConfigError("ptn.mode must be mask-mse or param-mse")
        if not 0.0 <= self["attack.beta"] <= 1.0:
            raise ConfigError("attack.beta must lie in [0, 1]")
        if len(self["classifier.surrogate_widths"]) != len(self["classifier.surrogate_seeds"]):
            raise ConfigError("surrogate widths and seeds differ in length")
        if len(self["classifier.victim_widths"]) != len(self["classifier.victim_seeds"]):
            raise ConfigError("victim widths and seeds differ in length")
        if set(self["classifier.surrogate_seeds"]) & set(self["classifier.victim_seeds"]):
            raise ConfigError("victim and surrogate seeds overlap")
        if set(self["classifier.surrogate_widths"]) & set(self["classifier.victim_widths"]):
            raise ConfigError("victim and surrogate widths overlap")
        if not 1 <= self["scene.held_out"] < self["scene.routes"]:
            raise ConfigError("scene.held_out must leave at least one training route")
        if self["baseline.queries"] < 1:
            raise ConfigError("baseline.queries must be at least 1")
        return self


def load_config(path=None, overrides=()):
    cfg = RunConfig()
    if path:
        try:
            with open(path) as fh:
                cfg.update_lines(fh.readlines(), path)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        cfg.set(k.strip(), v)
    return cfg.validate()
