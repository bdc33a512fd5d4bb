"""DeLA point network: decoupled local aggregation on a small numpy autodiff engine."""
