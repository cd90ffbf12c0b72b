from .probes import (DasmProfile, ProbeReport, boundary_mixing_check, contact_set_probe,
                     continuity_modulus, dasm_check, local_global_check, time_convex_dasm_check)
