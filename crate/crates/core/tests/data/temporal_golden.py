"""Regenerates temporal_golden.tsv from python's datetime."""
import random
from datetime import datetime, timezone

HOLIDAYS = {(1, 1), (6, 19), (7, 4), (11, 11), (12, 25)}

rng = random.Random(20240611)
lo = int(datetime(2015, 1, 1, tzinfo=timezone.utc).timestamp())
hi = int(datetime(2030, 12, 31, 23, 59, 59, tzinfo=timezone.utc).timestamp())
stamps = [rng.randrange(lo, hi) for _ in range(488)]
# fixed dates and hour edges
for y, m, d, h in [(2021, 12, 25, 16), (2019, 3, 4, 7), (2020, 1, 1, 0), (2022, 6, 19, 5),
                   (2022, 6, 19, 6), (2023, 7, 4, 8), (2023, 7, 4, 9), (2024, 2, 29, 11),
                   (2024, 2, 29, 12), (2025, 11, 11, 14), (2025, 11, 11, 15), (2026, 9, 1, 23)]:
    stamps.append(int(datetime(y, m, d, h, 59 if h % 2 else 0, tzinfo=timezone.utc).timestamp()))

print("ts\tseason\tmonth\tdate\tday\tweekday\tholiday\tpart_of_day\trush_hour")
for ts in stamps:
    t = datetime.fromtimestamp(ts, tz=timezone.utc)
    season = {12: 0, 1: 0, 2: 0, 3: 1, 4: 1, 5: 1, 6: 2, 7: 2, 8: 2}.get(t.month, 3)
    day = t.weekday()
    part = 0 if 6 <= t.hour < 12 else 1 if 12 <= t.hour < 18 else 2 if 18 <= t.hour < 24 else 3
    rush = 0 if 6 <= t.hour < 9 else 1 if 15 <= t.hour < 18 else 2
    hol = int((t.month, t.day) in HOLIDAYS)
    print(f"{ts}\t{season}\t{t.month}\t{t.day}\t{day}\t{int(day < 5)}\t{hol}\t{part}\t{rush}")
