"""Synthetic KDD-format traffic for demos and tests.

The generator mimics the coarse shape of KDD connection records (bursts of
normal http/smtp sessions interleaved with smurf, neptune and portsweep
bursts). It is not a substitute for the real dataset.
"""

from __future__ import annotations

import numpy as np

from .traffic import KDD_COLUMNS


def _row(values: dict) -> list[str]:
    out = []
    for name in KDD_COLUMNS:
        v = values.get(name, 0)
        if isinstance(v, str):
            out.append(v)
        elif isinstance(v, float) and not v.is_integer():
            out.append(f"{v:.2f}")
        else:
            out.append(str(int(v)))
    return out


def _normal(rng) -> list[str]:
    service = rng.choice(["http", "http", "http", "smtp", "ftp_data", "domain_u"])
    proto = "udp" if service == "domain_u" else "tcp"
    return _row({
        "duration": int(rng.integers(0, 3)) if service != "ftp_data" else int(rng.integers(0, 40)),
        "protocol_type": proto, "service": service, "flag": "SF",
        "src_bytes": int(abs(rng.normal(240, 60))), "dst_bytes": int(abs(rng.normal(1800, 700))),
        "logged_in": 1 if proto == "tcp" else 0,
        "count": int(rng.integers(1, 12)), "srv_count": int(rng.integers(1, 15)),
        "same_srv_rate": 1.0, "dst_host_count": int(rng.integers(5, 255)),
        "dst_host_srv_count": int(rng.integers(50, 255)), "dst_host_same_srv_rate": 1.0,
        "dst_host_same_src_port_rate": round(float(rng.uniform(0, 0.1)), 2),
    }) + ["normal."]


def _smurf(rng) -> list[str]:
    size = int(rng.choice([1032, 520]))
    return _row({
        "protocol_type": "icmp", "service": "ecr_i", "flag": "SF", "src_bytes": size,
        "count": 511, "srv_count": 511, "same_srv_rate": 1.0, "dst_host_count": 255,
        "dst_host_srv_count": 255, "dst_host_same_srv_rate": 1.0,
        "dst_host_same_src_port_rate": 1.0,
    }) + ["smurf."]


def _neptune(rng) -> list[str]:
    return _row({
        "protocol_type": "tcp", "service": "private", "flag": "S0",
        "count": int(rng.integers(100, 300)), "srv_count": int(rng.integers(5, 25)),
        "serror_rate": 1.0, "srv_serror_rate": 1.0, "same_srv_rate": round(float(rng.uniform(0, 0.1)), 2),
        "diff_srv_rate": 0.06, "dst_host_count": 255, "dst_host_srv_count": int(rng.integers(1, 25)),
        "dst_host_same_srv_rate": round(float(rng.uniform(0, 0.1)), 2), "dst_host_diff_srv_rate": 0.07,
        "dst_host_serror_rate": 1.0, "dst_host_srv_serror_rate": 1.0,
    }) + ["neptune."]


def _portsweep(rng) -> list[str]:
    return _row({
        "duration": int(rng.integers(0, 2)), "protocol_type": "tcp", "service": "private",
        "flag": "REJ", "count": 1, "srv_count": 1, "rerror_rate": 1.0, "srv_rerror_rate": 1.0,
        "same_srv_rate": 1.0, "dst_host_count": int(rng.integers(1, 50)), "dst_host_srv_count": 1,
        "dst_host_diff_srv_rate": 1.0, "dst_host_same_src_port_rate": 1.0,
        "dst_host_rerror_rate": 0.5, "dst_host_srv_rerror_rate": 1.0,
    }) + ["portsweep."]


KINDS = {"normal": _normal, "smurf": _smurf, "neptune": _neptune, "portsweep": _portsweep}


def synthetic_kdd_lines(n: int, seed: int = 0, attack_share: float = 0.5,
                        mean_burst: float = 12.0) -> list[str]:
    """``n`` KDD-format lines arranged in bursts of one traffic kind."""
    rng = np.random.default_rng(seed)
    lines: list[str] = []
    while len(lines) < n:
        if rng.random() < attack_share:
            kind = str(rng.choice(["smurf", "neptune", "portsweep"], p=[0.5, 0.35, 0.15]))
        else:
            kind = "normal"
        burst = int(rng.geometric(1.0 / mean_burst))
        for _ in range(min(burst, n - len(lines))):
            lines.append(",".join(KINDS[kind](rng)))
    return lines
