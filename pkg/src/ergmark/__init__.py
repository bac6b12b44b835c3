"""ergmark: time- and energy-to-solution benchmarking for data-parallel workloads."""

__version__ = "0.1.0"

from .backend import DeviceDescriptor, TimingRecord, dispatch, enumerate_devices
from .container import ResultBundle, RunRecord, read_results, read_workload, write_results
from .energy import (
    EnergyResult,
    TrendFit,
    ValidityReport,
    aggregate_runs,
    apply_corrections,
    check_validity,
    fit_trend,
    integrate_power,
    subtract_baseline,
)
from .orchestrator import RunConfig, align_trace_to_window, run_benchmark
from .power import (
    BaselineEstimate,
    PowerTrace,
    SyntheticProvider,
    import_external_trace,
    measure_baseline,
    read_energy_counter_power,
    sample_session,
)
