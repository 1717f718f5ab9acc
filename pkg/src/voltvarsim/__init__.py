"""Volt-Var control simulation on unbalanced radial feeders under cyberattack.

The package couples a three-phase linearized distribution power flow with a
control-center model (telemetry queue, Volt-Var optimizer) and an attack /
defense layer, all driven by a quasi-static time-series engine.
"""

__version__ = "0.1.0"
