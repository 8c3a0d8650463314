"""Independent reference computations shared by several test modules."""
import numpy as np


def pooled_features(samples):
    """Time-mean of |x| per fast-time bin, L2-normalized."""
    f = np.stack([np.abs(s.frames).mean(axis=0) for s in samples])
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def centroid_loso_accuracy(samples):
    """Leave-one-session-out nearest-class-centroid accuracy (mean over sessions)."""
    sessions = sorted({s.session for s in samples})
    feats = pooled_features(samples)
    words = np.array([s.word for s in samples])
    sess = np.array([s.session for s in samples])
    accs = []
    for held in sessions:
        tr, te = sess != held, sess == held
        classes = np.unique(words[tr])
        cent = np.stack([feats[tr & (words == c)].mean(axis=0) for c in classes])
        d = ((feats[te][:, None, :] - cent[None]) ** 2).sum(axis=2)
        accs.append(np.mean(classes[d.argmin(axis=1)] == words[te]))
    return float(np.mean(accs))
