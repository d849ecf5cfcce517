"""jobmig: broker-matched job execution with SLA-driven checkpoint migration.

A small multi-agent runtime: a resource broker matches jobs to providers,
provider nodes execute resumable tasks with incremental checkpointing, a
monitoring hierarchy detects SLA violations and withdrawals, and a
supervisory controller migrates jobs between nodes. A harness replays the
two reference scenarios (uninterrupted run vs mid-run migration) in
deterministic virtual time or against real node processes over TCP.
"""

__version__ = "0.1.0"
