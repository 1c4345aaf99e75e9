import json
import os

import numpy as np

from ..errors import ContractViolation

CHECKPOINT_VERSION = 1


class ParamStore:
    """Ordered ``name -> float64 array`` map with checkpoint I/O.

    Names are unique and an entry's shape never changes once created.
    """

    def __init__(self, kind, seed=0, version=CHECKPOINT_VERSION):
        self.kind = kind
        self.seed = int(seed)
        self.version = version
        self.entries = {}

    def add(self, name, value):
        if name in self.entries:
            raise ContractViolation(f"duplicate parameter name {name!r}")
        self.entries[name] = np.array(value, dtype=np.float64)
        return self.entries[name]

    def __getitem__(self, name):
        return self.entries[name]

    def __setitem__(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if name not in self.entries:
            raise ContractViolation(f"unknown parameter {name!r}; use add() to create it")
        if value.shape != self.entries[name].shape:
            raise ContractViolation(
                f"{name}: shape is fixed at {self.entries[name].shape}, got {value.shape}")
        self.entries[name] = value

    def __contains__(self, name):
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def items(self):
        return self.entries.items()

    def names(self):
        return list(self.entries)

    def copy(self):
        out = ParamStore(self.kind, self.seed, self.version)
        for k, v in self.entries.items():
            out.entries[k] = v.copy()
        return out

    def n_params(self):
        return int(sum(v.size for v in self.entries.values()))

    def equals(self, other):
        return (self.names() == other.names()
                and all(np.array_equal(self[k], other[k]) for k in self.entries))

    def to_json(self):
        def fmt(arr):
            if not np.all(np.isfinite(arr)):
                raise ContractViolation("cannot serialize non-finite parameters")
            return "[" + ",".join(format(float(v), ".17g") for v in arr.ravel()) + "]"

        parts = []
        for name, arr in self.entries.items():
            parts.append(f'{json.dumps(name)}:{{"shape":{json.dumps(list(arr.shape))},"data":{fmt(arr)}}}')
        return ('{"version":%d,"kind":%s,"seed":%d,"params":{%s}}'
                % (self.version, json.dumps(self.kind), self.seed, ",".join(parts)))

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        try:
            store = cls(doc["kind"], doc["seed"], doc["version"])
            for name, entry in doc["params"].items():
                arr = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
                store.add(name, arr)
        except (KeyError, TypeError, ValueError) as e:
            raise ContractViolation(f"malformed checkpoint: {e}") from None
        return store

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())
