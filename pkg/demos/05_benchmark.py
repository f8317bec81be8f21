"""Master cost as the number of replicas grows (small, fast version).

Each insert is logged once and shipped once per replica, so work should grow
linearly with the replica count.  Lag is measured on the virtual clock.
"""

from metacat.bench import fit_work_units, format_table, sweep

reports = sweep(range(0, 6), entries=1000, rate=200.0)
print(format_table(reports))
fit = fit_work_units(reports)
print(f"\nwork = {fit.intercept:.0f} + {fit.slope:.0f} x replicas, "
      f"worst residual {fit.relative_residual:.1%} of the slope")
