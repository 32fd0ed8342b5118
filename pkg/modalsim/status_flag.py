"""
modalsim 命令退出码

+------+--------------------------------------+
| code | meaning                              |
+------+--------------------------------------+
|  0   | success                              |
|  1   | property suite failure (verify only) |
|  2   | unresolved minimization              |
|  3   | invalid input / configuration        |
|  4   | dt guard violated, shrink dt         |
+------+--------------------------------------+
"""

EXIT_OK = 0
EXIT_PROPERTY_FAILED = 1
EXIT_UNRESOLVED = 2
EXIT_INVALID_INPUT = 3
EXIT_STEP_SIZE = 4

EXIT_MAP = {
    EXIT_OK: "ok",
    EXIT_PROPERTY_FAILED: "property failed",
    EXIT_UNRESOLVED: "unresolved minimization",
    EXIT_INVALID_INPUT: "invalid input",
    EXIT_STEP_SIZE: "step size too large",
}

# decomposition methods
METHOD_PRODUCT_CUT = "theorem4"
METHOD_BRUTE_FORCE = "brute_force"
METHOD_BI_ORTHOGONAL = "bi_orthogonal"

# ensemble output formats
FORMAT_CSV = "csv"
FORMAT_JSON = "json"
SUPPORT_FORMATS = (FORMAT_CSV, FORMAT_JSON)

# commands
CMD_DECOMPOSE = "decompose"
CMD_RUN = "run"
CMD_VERIFY = "verify"
CMD_FAITHFULNESS = "faithfulness"
SUPPORT_COMMANDS = (CMD_DECOMPOSE, CMD_RUN, CMD_VERIFY, CMD_FAITHFULNESS)


def get_status_for_human(code):
    if code in EXIT_MAP:
        return EXIT_MAP[code]
    return "unknown"
