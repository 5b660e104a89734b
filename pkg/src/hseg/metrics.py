"""Pixel-level segmentation metrics: confusion counts, Sen/Sp/F1/Acc/IoU, and rank AUC."""
import csv
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

CSV_COLUMNS = ("image_id", "sen", "sp", "f1", "acc", "iou", "auc")


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def swapped(self):
        """Counts for the complementary labelling (foreground <-> background)."""
        return Confusion(self.tn, self.tp, self.fn, self.fp)


def confusion(prob, gt, threshold=0.5):
    """Pixel p is predicted foreground iff prob(p) >= threshold."""
    prob = np.asarray(prob)
    gt = np.asarray(gt)
    if prob.shape != gt.shape:
        raise ValueError(f"prediction shape {prob.shape} does not match target shape {gt.shape}")
    pred = prob >= threshold
    truth = gt > 0.5
    tp = np.count_nonzero(pred & truth)
    fp = np.count_nonzero(pred & ~truth)
    fn = np.count_nonzero(~pred & truth)
    tn = truth.size - tp - fp - fn
    return Confusion(int(tp), int(tn), int(fp), int(fn))


def _ratio(num, den):
    # 0/0 only happens for a vacuous class; report it as perfect
    return 1.0 if den == 0 else num / den


def metrics(conf):
    if conf.total <= 0:
        raise ValueError("metrics need at least one pixel")
    tp, tn, fp, fn = conf.tp, conf.tn, conf.fp, conf.fn
    return {
        "sen": _ratio(tp, tp + fn),
        "sp": _ratio(tn, tn + fp),
        "f1": _ratio(2 * tp, 2 * tp + fp + fn),
        "acc": (tp + tn) / conf.total,
        "iou": _ratio(tp, tp + fp + fn),
    }


def auc(scores, labels):
    """ROC AUC as the Mann-Whitney statistic; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel() > 0.5
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    n_pos = int(np.count_nonzero(y))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined unless both classes are present")
    ranks = rankdata(s)  # average ranks handle ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    image_id: str
    sen: float
    sp: float
    f1: float
    acc: float
    iou: float
    auc: float
    confusion: Confusion | None = None

    @classmethod
    def from_prediction(cls, image_id, prob, gt, threshold=0.5):
        conf = confusion(prob, gt, threshold)
        try:
            a = auc(prob, gt)
        except ValueError:
            a = float("nan")  # single-class image
        return cls(image_id, **metrics(conf), auc=a, confusion=conf)

    def values(self):
        return {k: getattr(self, k) for k in CSV_COLUMNS[1:]}

    def to_text(self):
        lines = [f"image_id={self.image_id}"]
        lines += [f"{k}={v:.6f}" for k, v in self.values().items()]
        if self.confusion is not None:
            lines += [f"{k}={v}" for k, v in asdict(self.confusion).items()]
        return "\n".join(lines)

    def csv_row(self):
        return [self.image_id] + [f"{v:.6f}" for v in self.values().values()]


def mean_report(reports, image_id="mean"):
    """Unweighted mean over images; NaN AUCs (single-class images) are skipped."""
    if not reports:
        raise ValueError("no reports to aggregate")
    vals = {k: np.array([getattr(r, k) for r in reports], dtype=np.float64) for k in CSV_COLUMNS[1:]}
    out = {}
    for k, v in vals.items():
        ok = ~np.isnan(v)
        out[k] = float(v[ok].mean()) if ok.any() else float("nan")
    return MetricsReport(image_id, **out)


def write_csv(reports, path, include_mean=True):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in reports:
            writer.writerow(r.csv_row())
        if include_mean:
            writer.writerow(mean_report(reports).csv_row())
