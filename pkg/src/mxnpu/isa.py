"""Instruction set, programs and their text/JSON encodings.

Assembly is one instruction per line::

    TMATMUL y, x, w psum=m bias=b cwq=s flags=EXP|RLU out=MXINT8 unit=ppa dram=1024

Operands are tensor ids; everything after the sources is ``key=value``.
Tensor shapes, dtypes and residence live in a separate JSON manifest.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

OPCODES = ("TMATMUL", "MEAN_SQUARE", "LUT", "RESCALE", "MEAN", "MUL", "ADD", "SYNC")
UTILITY_OPCODES = ("LOAD", "STORE", "TRANSPOSE", "CONVERT", "CONCAT")
ALL_OPCODES = OPCODES + UTILITY_OPCODES

FLAG_NAMES = ("INV", "SQR", "EXP", "RLU", "RELU")
DTYPES = ("FI32", "MXINT8", "INT16", "INT8", "INT4", "UINT4", "UINT8")
UNITS = ("ppa", "sfu")

# flags each opcode may carry
LEGAL_FLAGS = {
    "TMATMUL": {"EXP", "RLU", "RELU"},
    "LUT": {"INV", "SQR", "EXP", "RLU", "RELU"},
    "MEAN_SQUARE": set(),
    "MEAN": set(),
    "RESCALE": set(),
    "MUL": set(),
    "ADD": set(),
}

# number of source operands per opcode (None: one or more)
ARITY = {
    "TMATMUL": 2, "MEAN_SQUARE": 1, "LUT": 1, "RESCALE": 2, "MEAN": 1, "MUL": 2, "ADD": 2,
    "SYNC": 0, "LOAD": 1, "STORE": 1, "TRANSPOSE": 1, "CONVERT": 1, "CONCAT": None,
}

_SIDE_OPERANDS = ("psum", "bias", "cwq")


class ProgramError(ValueError):
    """Malformed instruction or program."""


@dataclass
class TensorDesc:
    tid: str
    shape: tuple
    dtype: str
    residence: str = "DRAM"

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.dtype not in DTYPES:
            raise ProgramError(f"unknown dtype {self.dtype}")
        if self.residence not in ("DRAM", "SRAM"):
            raise ProgramError(f"unknown residence {self.residence}")


@dataclass
class Instruction:
    opcode: str
    out: str | None = None
    srcs: tuple = ()
    psum: str | None = None
    bias: str | None = None
    cwq: str | None = None
    flags: frozenset = frozenset()
    out_dtype: str = "FI32"
    unit: str = "ppa"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.srcs = tuple(self.srcs)
        self.flags = frozenset(self.flags)
        self.validate()

    def validate(self):
        if self.opcode not in ALL_OPCODES:
            raise ProgramError(f"unknown opcode {self.opcode}")
        want = ARITY[self.opcode]
        if want is None:
            if not self.srcs:
                raise ProgramError(f"{self.opcode} needs at least one source")
        elif len(self.srcs) != want:
            raise ProgramError(f"{self.opcode} takes {want} sources, got {len(self.srcs)}")
        bad = set(self.flags) - LEGAL_FLAGS.get(self.opcode, set())
        if bad:
            raise ProgramError(f"flags {sorted(bad)} not legal on {self.opcode}")
        if self.psum and self.opcode != "TMATMUL":
            raise ProgramError("PSUM only feeds TMATMUL")
        if self.out_dtype not in DTYPES:
            raise ProgramError(f"unknown dtype {self.out_dtype}")
        if self.unit not in UNITS:
            raise ProgramError(f"unknown unit {self.unit}")
        if self.opcode == "SYNC":
            if "id" not in self.meta:
                raise ProgramError("SYNC needs id=")
        elif self.out is None:
            raise ProgramError(f"{self.opcode} needs a destination")

    def reads(self) -> list:
        return list(self.srcs) + [t for t in (self.psum, self.bias, self.cwq) if t]

    def to_asm(self) -> str:
        if self.opcode == "SYNC":
            head = "SYNC"
        else:
            head = f"{self.opcode} " + ", ".join([self.out, *self.srcs])
        parts = [head]
        for key in _SIDE_OPERANDS:
            if getattr(self, key):
                parts.append(f"{key}={getattr(self, key)}")
        if self.flags:
            parts.append("flags=" + "|".join(sorted(self.flags)))
        if self.out_dtype != "FI32":
            parts.append(f"out={self.out_dtype}")
        if self.unit != "ppa":
            parts.append(f"unit={self.unit}")
        for k in sorted(self.meta):
            parts.append(f"{k}={_encode_value(self.meta[k])}")
        return " ".join(parts)

    @classmethod
    def from_asm(cls, line: str) -> "Instruction":
        line = line.split("#", 1)[0].strip()
        if not line:
            raise ProgramError("empty line")
        opcode, _, rest = line.partition(" ")
        tokens = rest.replace(",", " ").split()
        ids = [t for t in tokens if "=" not in t]
        kv = dict(t.split("=", 1) for t in tokens if "=" in t)
        kwargs = {"meta": {}}
        for key, val in kv.items():
            if key in _SIDE_OPERANDS:
                kwargs[key] = val
            elif key == "flags":
                kwargs["flags"] = frozenset(val.split("|"))
            elif key == "out":
                kwargs["out_dtype"] = val
            elif key == "unit":
                kwargs["unit"] = val
            else:
                kwargs["meta"][key] = _decode_value(val)
        if opcode == "SYNC":
            return cls(opcode, None, (), **kwargs)
        if not ids:
            raise ProgramError(f"{opcode} needs a destination")
        return cls(opcode, ids[0], tuple(ids[1:]), **kwargs)


def _encode_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return ":".join(str(x) for x in v)
    s = str(v)
    if any(c.isspace() for c in s) or "," in s or "=" in s:
        raise ProgramError(f"meta value {s!r} cannot be encoded")
    return s


def _decode_value(s: str):
    if ":" in s:
        return tuple(_decode_value(x) for x in s.split(":"))
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


@dataclass
class Program:
    instructions: list = field(default_factory=list)
    tensors: dict = field(default_factory=dict)
    inputs: tuple = ()
    outputs: tuple = ()
    name: str = "program"
    plans: dict = field(default_factory=dict)  # plan id -> {"spec": ..., "plan": ...}

    def add_tensor(self, tid: str, shape, dtype: str, residence: str = "DRAM") -> str:
        if tid in self.tensors:
            raise ProgramError(f"tensor {tid} declared twice")
        self.tensors[tid] = TensorDesc(tid, shape, dtype, residence)
        return tid

    def emit(self, opcode: str, out=None, *srcs, **kw) -> Instruction:
        ins = Instruction(opcode, out, srcs, **kw)
        self.instructions.append(ins)
        return ins

    def validate(self):
        known = set(self.inputs)
        for i, ins in enumerate(self.instructions):
            ins.validate()
            for t in ins.reads():
                if t not in known:
                    raise ProgramError(f"instruction {i} ({ins.opcode}) reads {t} before it is written")
                if t not in self.tensors:
                    raise ProgramError(f"tensor {t} missing from manifest")
            if ins.out is not None:
                if ins.out not in self.tensors:
                    raise ProgramError(f"tensor {ins.out} missing from manifest")
                known.add(ins.out)
        for t in self.outputs:
            if t not in known:
                raise ProgramError(f"output {t} never produced")

    def sync_ids(self) -> list:
        return [ins.meta["id"] for ins in self.instructions if ins.opcode == "SYNC"]

    def count(self, opcode: str) -> int:
        return sum(ins.opcode == opcode for ins in self.instructions)

    def to_asm(self) -> str:
        return "\n".join(ins.to_asm() for ins in self.instructions) + "\n"

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
            "tensors": [asdict(t) | {"shape": list(t.shape)} for t in self.tensors.values()],
            "plans": self.plans,
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), indent=1)

    @classmethod
    def from_text(cls, asm: str, manifest) -> "Program":
        if isinstance(manifest, str):
            manifest = json.loads(manifest)
        tensors = {t["tid"]: TensorDesc(t["tid"], t["shape"], t["dtype"], t["residence"])
                   for t in manifest["tensors"]}
        instrs = []
        for line in asm.splitlines():
            if line.split("#", 1)[0].strip():
                instrs.append(Instruction.from_asm(line))
        return cls(instrs, tensors, tuple(manifest["inputs"]), tuple(manifest["outputs"]),
                   manifest.get("name", "program"), dict(manifest.get("plans", {})))
