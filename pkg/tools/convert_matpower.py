"""Convert MATPOWER distribution cases (loads in kW, impedances in ohm) to voltvar case files.

Usage: python tools/convert_matpower.py case33bw.m > src/voltvar/data/case33bw.case
Out-of-service branches (tie switches) are dropped.
"""
import re
import sys


def block(text, name):
    m = re.search(r"mpc\.%s = \[(.*?)\];" % name, text, re.S)
    rows = []
    for line in m.group(1).splitlines():
        line = line.split("%")[0].strip().rstrip(";")
        if line:
            rows.append(line.split())
    return rows


def main(path):
    text = open(path).read()
    base_mva = re.search(r"mpc\.baseMVA = ([\d.]+);", text).group(1)
    bus = block(text, "bus")
    branch = block(text, "branch")
    name = path.rsplit("/", 1)[-1][:-2]
    out = [f"# {name}: converted from MATPOWER; loads kW -> MW, branch impedances in ohm",
           f"baseMVA {base_mva}", f"baseKV {bus[0][9]}", "bus", "# id type Pd_MW Qd_MVar"]
    for row in bus:
        p = float(row[2]) / 1e3
        q = float(row[3]) / 1e3
        out.append(f"{row[0]} {row[1]} {p:.10g} {q:.10g}")
    out += ["branch", "# from to r x unit"]
    for row in branch:
        if float(row[10]) == 0:
            continue
        out.append(f"{row[0]} {row[1]} {row[2]} {row[3]} 1")
    print("\n".join(out))


if __name__ == "__main__":
    main(sys.argv[1])
