"""Checkpoint containers: named arrays plus embedded configs and a schema version."""

import os
from dataclasses import asdict
from pathlib import Path

import torch

from .discriminator import DiscriminatorConfig, UNetDiscriminator
from .errors import CheckpointError
from .generator import DeblurGenerator, GeneratorConfig

CHECKPOINT_SCHEMA_VERSION = 1


def component_payload(component, config, module):
    return {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "component": component,
        "config": asdict(config),
        "state_dict": module.state_dict(),
    }


def save_checkpoint(path, payload):
    """Atomic write: serialize to a sibling temp file, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def _validate_shapes(module, state_dict, component):
    own = module.state_dict()
    problems = []
    for name, tensor in own.items():
        if name not in state_dict:
            problems.append(f"missing {name}")
        elif tuple(state_dict[name].shape) != tuple(tensor.shape):
            problems.append(
                f"{name}: checkpoint {tuple(state_dict[name].shape)} vs model {tuple(tensor.shape)}"
            )
    for name in state_dict:
        if name not in own:
            problems.append(f"unexpected {name}")
    if problems:
        raise CheckpointError(
            f"{component} checkpoint incompatible with model: " + "; ".join(problems[:8])
        )


def _component_dict(raw, component):
    if raw.get("component") == component:
        return raw
    if component in raw:  # trainer checkpoints nest per-component payloads
        return raw[component]
    raise CheckpointError(
        f"checkpoint holds component {raw.get('component')!r}, expected {component!r}"
    )


def load_raw(path):
    try:
        raw = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(raw, dict) or "schema_version" not in raw:
        raise CheckpointError(f"{path} is not a recognized checkpoint")
    if raw["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema_version {raw['schema_version']!r}")
    return raw


def load_generator(path) -> DeblurGenerator:
    """Load a generator from its own checkpoint or from a trainer checkpoint."""
    payload = _component_dict(load_raw(path), "generator")
    model = DeblurGenerator(GeneratorConfig(**payload["config"]))
    _validate_shapes(model, payload["state_dict"], "generator")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def load_discriminator(path) -> UNetDiscriminator:
    payload = _component_dict(load_raw(path), "discriminator")
    model = UNetDiscriminator(DiscriminatorConfig(**payload["config"]))
    _validate_shapes(model, payload["state_dict"], "discriminator")
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def load_into(module, path, component):
    """Load state into an existing model, validating shapes first."""
    payload = _component_dict(load_raw(path), component)
    _validate_shapes(module, payload["state_dict"], component)
    module.load_state_dict(payload["state_dict"])
    return payload
