"""adapterd: a deterministic multi-LoRA serving simulator and benchmark harness.

The package has three faces:

- a discrete-event simulator (and live SSE service) of a multi-adapter LLM
  deployment with dynamic adapter loading, continuous multi-adapter batching,
  and tiered weight caching;
- a closed-loop benchmark harness producing latency/throughput reports;
- a task-complexity profiler that predicts fine-tuning quality lift with
  linear regression over z-scored heuristics.
"""

__version__ = "0.1.0"
