"""Published leaderboard rows: (team, PSNR dB, runtime ms, final score)."""

TABLE1 = [
    ("dh_isp", 23.2, 61.0, 25.98),
    ("AIISP", 23.73, 90.8, 25.91),
    ("Tuned U-Net", 23.30, 78.0, 25.74),
    ("ENERZAi Research", 22.97, 65.0, 25.67),
    ("isp_forever", 22.78, 77.0, 25.24),
    ("NOAHTCV", 23.08, 94.5, 25.19),
    ("ACVLab", 22.03, 76.3, 24.5),
    ("CVML", 22.84, 167.0, 23.5),
    ("ENERZAi Research *", 23.41, 231.0, 23.39),
    ("EdS", 23.23, 1861.0, 22.4),
]
