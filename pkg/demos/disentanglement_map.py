"""Where in (alpha1, alpha2) space do two task vectors stop interfering?

Scans the 20x20 grid over [-3, 3)^2 for one task pair and draws the
disagreement xi as a character map: '.' means xi < 0.05, darker means
the merged model disagrees more with the single-task edits.

    python3 demos/disentanglement_map.py [task_a task_b]
"""
import sys

from tta.bench import ExperimentSetup, prepare_seed
from tta.disentangle import GridSpec, grid_scan, linearized_eval, nonlinear_eval

a, b = (int(v) for v in sys.argv[1:3]) if len(sys.argv) > 2 else (0, 1)
run = prepare_seed(0, ExperimentSetup())
shades = " .:-=+*#%@"


def draw(grid):
    # rows: alpha1 from top (+) to bottom (-); columns: alpha2 left to right
    for i in reversed(range(grid.xi.shape[0])):
        cells = "".join("." if x < 0.05 else shades[min(9, 1 + int(x / 0.2))] for x in grid.xi[i])
        print(f"  {grid.alpha1_values[i]:+.1f} |{cells}|")


for method, evaluate, kind in (("nonlinear", nonlinear_eval, "nonlinear"),
                               ("linearized", linearized_eval, "linearized")):
    taus = run.taus(kind)
    g = grid_scan(evaluate(run.base), run.base.params, taus[a], taus[b], GridSpec(), 512, 0,
                  task_pair=(run.suite.specs[a], run.suite.specs[b]), method=method)
    print(f"\n{method}: share of cells with xi < 0.05 = {g.area_below(0.05):.3f}")
    draw(g)
