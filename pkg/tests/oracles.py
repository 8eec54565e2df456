"""Independent reference implementations shared by several test modules."""


def replay_oracle(d, count):
    """Brute-force replay of the shrinking maximum filter.

    Widths run N, N//2, ... while above 3, then 3, then 1, where N = len(d) + 1
    frames. Index t is a local maximum at width w when no score within w//2
    positions beats it (equal scores: the lower index wins). New maxima are
    appended per width; the round that overshoots keeps its largest scores.
    """
    n = len(d)
    widths = []
    w = n + 1
    while w > 3:
        widths.append(w)
        w = w // 2
    widths += [3, 1]
    chosen = []
    for w in widths:
        r = w // 2
        found = []
        for t in range(n):
            ok = True
            for s in range(max(0, t - r), min(n, t + r + 1)):
                if d[s] > d[t] or (d[s] == d[t] and s < t):
                    ok = False
                    break
            if ok and t not in chosen:
                found.append(t)
        if len(chosen) + len(found) >= count:
            found.sort(key=lambda t: (-d[t], t))
            chosen += found[: count - len(chosen)]
            break
        chosen += found
    return sorted(t + 1 for t in chosen)
