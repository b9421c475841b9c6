"""Build a DirectMap over duplicate keys and show where guests land.

    python docs/examples/directmap_demo.py
"""

from __future__ import annotations

from querysplit import DirectMap

m = DirectMap()
for key, payload in [(1, "a"), (1, "b"), (0, "c"), (1, "d"), (2, "e"), (6, "f")]:
    m.insert(key, payload)
    print(f"insert {key}:{payload}  capacity={m.capacity}")

m.validate()
print("\nrow  valid key  prev next slot")
for r in range(m.capacity):
    print(f"{r:3d}  {m.valid[r]!s:5} {m.keys[r]!s:4} {m.prev[r]!s:4} {m.next[r]!s:4} {m.slot[r]}")
print()
for key in range(7):
    print(key, list(m.probe(key)))
