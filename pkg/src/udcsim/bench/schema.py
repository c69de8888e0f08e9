"""JSON schemas for the reports written by the harness."""

_triple = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_probe = {
    "type": "object",
    "required": ["recovered", "oracle", "rel_error"],
    "properties": {"recovered": _triple, "oracle": _triple, "rel_error": _triple},
}

EVAL_SCHEMA = {
    "type": "object",
    "required": ["per_image", "psnr", "ssim", "params", "macs", "config_hash", "seed"],
    "properties": {
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "psnr", "ssim"],
                "properties": {"name": {"type": "string"}, "psnr": {"type": "number"}, "ssim": {"type": "number"}},
            },
        },
        "psnr": {"type": "number"},
        "ssim": {"type": "number"},
        "params": {"type": ["integer", "null"]},
        "macs": {"type": ["integer", "null"]},
        "macs_resolution": {"type": "integer"},
        "config_hash": {"type": ["string", "null"]},
        "seed": {"type": ["integer", "null"]},
        "tag": {"type": ["string", "null"]},
    },
}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "closed-loop report",
    "type": "object",
    "required": ["kind", "self_check", "seed", "config_hash", "config", "split", "probes", "restorers",
                 "psnr_gap_db", "ssim_gap", "training", "timing_s"],
    "properties": {
        "kind": {"const": "closed-loop"},
        "self_check": {"type": "boolean"},
        "seed": {"type": "integer", "minimum": 0},
        "config_hash": {"type": "string", "pattern": "^[0-9a-f]{16}$"},
        "config": {"type": "object"},
        "split": {
            "type": "object",
            "required": ["train", "val", "test"],
            "properties": {k: {"type": "integer", "minimum": 0} for k in ("train", "val", "test")},
        },
        "probes": {
            "type": "object",
            "required": ["brightness", "noise_variance", "impulse"],
            "properties": {
                "brightness": _probe,
                "noise_variance": _probe,
                "impulse": {
                    "type": "object",
                    "required": ["l1", "mass", "kernel_size", "response"],
                    "properties": {"l1": _triple, "mass": _triple, "kernel_size": {"type": "integer"},
                                   "response": {"type": "array"}},
                },
            },
        },
        "restorers": {
            "type": "object",
            "required": ["generated", "oracle"],
            "properties": {"generated": EVAL_SCHEMA, "oracle": EVAL_SCHEMA},
        },
        "psnr_gap_db": {"type": "number"},
        "ssim_gap": {"type": "number"},
        "training": {"type": "object"},
        "timing_s": {"type": "object", "additionalProperties": {"type": "number"}},
    },
}
