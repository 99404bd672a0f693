#!/usr/bin/env python3
"""Convert a discrete BIF network file into the JSON network format.

CPT rows are ordered row-major over the parent list: the row index is the
mixed-radix number formed by the parent states, last parent fastest.
"""
import json
import re
import sys


def parse_bif(text):
    variables = {}
    order = []
    for m in re.finditer(r"variable\s+(\S+)\s*\{\s*type\s+discrete\s*\[\s*(\d+)\s*\]\s*\{([^}]*)\}", text):
        name = m.group(1)
        states = [s.strip() for s in m.group(3).split(",")]
        assert len(states) == int(m.group(2)), name
        variables[name] = states
        order.append(name)

    cpts = {}
    for m in re.finditer(r"probability\s*\(\s*([^|)]+?)\s*(?:\|\s*([^)]*))?\)\s*\{([^}]*)\}", text):
        child = m.group(1).strip()
        parents = [p.strip() for p in m.group(2).split(",")] if m.group(2) else []
        body = m.group(3)
        card = len(variables[child])
        n_rows = 1
        for p in parents:
            n_rows *= len(variables[p])
        table = [None] * n_rows
        t = re.search(r"table\s+([^;]*);", body)
        if t:
            values = [float(v) for v in t.group(1).replace("\n", " ").split(",")]
            assert len(values) == card * n_rows, child
            if parents:
                # BIF 'table' lists values with the child state slowest.
                for row in range(n_rows):
                    table[row] = [values[s * n_rows + row] for s in range(card)]
            else:
                table[0] = values
        for r in re.finditer(r"\(([^)]*)\)\s*([^;]*);", body):
            states = [s.strip() for s in r.group(1).split(",")]
            row = 0
            for p, s in zip(parents, states):
                row = row * len(variables[p]) + variables[p].index(s)
            table[row] = [float(v) for v in r.group(2).split(",")]
        assert all(row is not None for row in table), child
        cpts[child] = (parents, table)
    return variables, order, cpts


def main():
    if len(sys.argv) != 5:
        print("usage: bif_to_json.py IN.bif OUT.json NAME TASK", file=sys.stderr)
        return 1
    with open(sys.argv[1]) as f:
        variables, order, cpts = parse_bif(f.read())
    nodes = []
    for name in order:
        parents, table = cpts[name]
        flat = []
        for row in table:
            total = sum(row)
            flat.extend(v / total for v in row)
        nodes.append({
            "name": name,
            "cardinality": len(variables[name]),
            "states": variables[name],
            "parents": parents,
            "cpt": flat,
        })
    doc = {"name": sys.argv[3], "task": sys.argv[4], "nodes": nodes}
    with open(sys.argv[2], "w") as f:
        json.dump(doc, f, indent=1)
        f.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
