"""Microscopic grid traffic simulator."""

from .engine import (STOP_SPEED, IntersectionMeasurement, LaneMeasurement, SimConfig, SimState,
                     TripRecord, advance_decision_interval, set_phase, spawn_from_flow, step_sim)
from .flow import FlowEntry, ScheduledVehicle, expand_flows, synthetic_flow
from .idm import IdmParams, free_travel_distance, idm_accel
from .network import (ALL_RED, NUM_PHASES, PHASE_NAMES, NetworkError, RoadNetwork, build_grid,
                      load_network)
