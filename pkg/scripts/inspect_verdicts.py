import sys
from pathlib import Path

import pandas as pd


def summarize(verdicts: pd.DataFrame) -> pd.DataFrame:
    """Flag count and earliest flag time (minutes) per sensor and copy."""
    if verdicts.empty:
        return pd.DataFrame(columns=["sensor_id", "copy", "flags", "first_flag_min"])
    keys = ["sensor_id", "copy"] if "copy" in verdicts.columns else ["sensor_id"]
    table = verdicts.groupby(keys).agg(flags=("flag_interval", "size"), first_flag_min=("flag_time_s", "min")).reset_index()
    table["first_flag_min"] = table["first_flag_min"] / 60.0
    return table.sort_values(["flags"] + keys, ascending=[False] + [True] * len(keys)).reset_index(drop=True)


if __name__ == "__main__":
    path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("out") / "verdicts.csv"
    if not path.exists():
        print('No verdicts at', path)
        sys.exit(1)
    df = pd.read_csv(path)
    print('Reading', path, f'({len(df)} verdicts)')
    print(summarize(df).to_string(index=False))
