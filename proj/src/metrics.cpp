#include "mmim/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace mmim {

namespace {

void require_same_length(size_t a, size_t b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": length mismatch " + std::to_string(a) + " vs " +
                                std::to_string(b));
  }
}

void require_nonempty(size_t n, const char* what) {
  if (n == 0) throw std::invalid_argument(std::string(what) + ": empty input");
}

void require_classes_in_range(const std::vector<int>& v, int num_classes, const char* what) {
  for (int c : v) {
    if (c < 0 || c >= num_classes) {
      throw std::out_of_range(std::string(what) + ": class id " + std::to_string(c) + " outside [0," +
                              std::to_string(num_classes) + ")");
    }
  }
}

double binary_f1(size_t tp, size_t fp, size_t fn) {
  const double denom = static_cast<double>(2 * tp + fp + fn);
  return denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(tp) / denom;
}

}  // namespace

double metric_accuracy(const std::vector<int>& labels, const std::vector<int>& preds) {
  require_same_length(labels.size(), preds.size(), "accuracy");
  require_nonempty(labels.size(), "accuracy");
  size_t hits = 0;
  for (size_t i = 0; i < labels.size(); ++i) hits += labels[i] == preds[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

MacroF1Result metric_macro_f1_detailed(const std::vector<int>& labels, const std::vector<int>& preds,
                                       int num_classes) {
  require_same_length(labels.size(), preds.size(), "macro_f1");
  require_nonempty(labels.size(), "macro_f1");
  if (num_classes <= 0) throw std::invalid_argument("macro_f1: num_classes must be positive");
  require_classes_in_range(labels, num_classes, "macro_f1");
  require_classes_in_range(preds, num_classes, "macro_f1");
  MacroF1Result res;
  res.per_class_f1.resize(num_classes, 0.0);
  res.undefined.resize(num_classes, 0);
  double sum = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    size_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      const bool is_label = labels[i] == c;
      const bool is_pred = preds[i] == c;
      tp += is_label && is_pred;
      fp += !is_label && is_pred;
      fn += is_label && !is_pred;
    }
    if (tp + fp + fn == 0) res.undefined[c] = 1;
    res.per_class_f1[c] = binary_f1(tp, fp, fn);
    sum += res.per_class_f1[c];
  }
  res.macro_f1 = sum / static_cast<double>(num_classes);
  return res;
}

double metric_macro_f1(const std::vector<int>& labels, const std::vector<int>& preds, int num_classes) {
  return metric_macro_f1_detailed(labels, preds, num_classes).macro_f1;
}

double metric_micro_f1(const std::vector<int>& labels, const std::vector<int>& preds, int num_classes) {
  require_same_length(labels.size(), preds.size(), "micro_f1");
  require_nonempty(labels.size(), "micro_f1");
  require_classes_in_range(labels, num_classes, "micro_f1");
  require_classes_in_range(preds, num_classes, "micro_f1");
  size_t tp = 0, fp = 0, fn = 0;
  for (int c = 0; c < num_classes; ++c) {
    for (size_t i = 0; i < labels.size(); ++i) {
      const bool is_label = labels[i] == c;
      const bool is_pred = preds[i] == c;
      tp += is_label && is_pred;
      fp += !is_label && is_pred;
      fn += is_label && !is_pred;
    }
  }
  return binary_f1(tp, fp, fn);
}

double metric_macro_f1_multilabel(const std::vector<std::vector<int>>& labels,
                                  const std::vector<std::vector<int>>& preds) {
  require_same_length(labels.size(), preds.size(), "macro_f1_multilabel");
  require_nonempty(labels.size(), "macro_f1_multilabel");
  const size_t C = labels[0].size();
  double sum = 0.0;
  for (size_t c = 0; c < C; ++c) {
    size_t tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      if (labels[i].size() != C || preds[i].size() != C) {
        throw std::invalid_argument("macro_f1_multilabel: ragged label matrix");
      }
      const bool is_label = labels[i][c] != 0;
      const bool is_pred = preds[i][c] != 0;
      tp += is_label && is_pred;
      fp += !is_label && is_pred;
      fn += is_label && !is_pred;
    }
    sum += binary_f1(tp, fp, fn);
  }
  return sum / static_cast<double>(C);
}

std::vector<std::vector<int>> multilabel_predictions(const std::vector<std::vector<double>>& logits,
                                                     double threshold) {
  std::vector<std::vector<int>> preds(logits.size());
  for (size_t i = 0; i < logits.size(); ++i) {
    preds[i].resize(logits[i].size());
    for (size_t c = 0; c < logits[i].size(); ++c) preds[i][c] = logits[i][c] > threshold ? 1 : 0;
  }
  return preds;
}

double metric_roc_auc(const std::vector<int>& labels, const std::vector<double>& scores) {
  require_same_length(labels.size(), scores.size(), "roc_auc");
  require_nonempty(labels.size(), "roc_auc");
  size_t n_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("roc_auc: labels must be 0/1");
    n_pos += y;
  }
  const size_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw std::invalid_argument("roc_auc: undefined, only one class present");
  }
  // Mann-Whitney via average ranks; tied scores share their mean rank,
  // which counts each tied positive/negative pair as one half.
  std::vector<size_t> order(labels.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(labels.size());
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;  // ranks are 1-based
    for (size_t k = i; k <= j; ++k) rank[order[k]] = avg_rank;
    i = j + 1;
  }
  double rank_sum_pos = 0.0;
  for (size_t s = 0; s < labels.size(); ++s) {
    if (labels[s] == 1) rank_sum_pos += rank[s];
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
  return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

double metric_pr_auc(const std::vector<int>& labels, const std::vector<double>& scores) {
  require_same_length(labels.size(), scores.size(), "pr_auc");
  require_nonempty(labels.size(), "pr_auc");
  size_t n_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("pr_auc: labels must be 0/1");
    n_pos += y;
  }
  if (n_pos == 0) throw std::invalid_argument("pr_auc: undefined, no positives");
  std::vector<size_t> order(labels.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0;
  size_t tp = 0;
  for (size_t k = 0; k < order.size(); ++k) {
    if (labels[order[k]] == 1) {
      ++tp;
      const double precision = static_cast<double>(tp) / static_cast<double>(k + 1);
      ap += precision / static_cast<double>(n_pos);  // recall step is 1/n_pos per positive
    }
  }
  return ap;
}

double metric_map(const std::vector<std::vector<int>>& labels_per_class,
                  const std::vector<std::vector<double>>& scores_per_class) {
  require_same_length(labels_per_class.size(), scores_per_class.size(), "map");
  require_nonempty(labels_per_class.size(), "map");
  double sum = 0.0;
  for (size_t c = 0; c < labels_per_class.size(); ++c) {
    sum += metric_pr_auc(labels_per_class[c], scores_per_class[c]);
  }
  return sum / static_cast<double>(labels_per_class.size());
}

double metric_micro_ap(const std::vector<std::vector<int>>& labels_per_class,
                       const std::vector<std::vector<double>>& scores_per_class) {
  require_same_length(labels_per_class.size(), scores_per_class.size(), "micro_ap");
  require_nonempty(labels_per_class.size(), "micro_ap");
  std::vector<int> labels;
  std::vector<double> scores;
  for (size_t c = 0; c < labels_per_class.size(); ++c) {
    require_same_length(labels_per_class[c].size(), scores_per_class[c].size(), "micro_ap");
    labels.insert(labels.end(), labels_per_class[c].begin(), labels_per_class[c].end());
    scores.insert(scores.end(), scores_per_class[c].begin(), scores_per_class[c].end());
  }
  return metric_pr_auc(labels, scores);
}

MiouResult metric_miou(const std::vector<std::vector<int>>& label_masks,
                       const std::vector<std::vector<int>>& pred_masks, int num_classes) {
  require_same_length(label_masks.size(), pred_masks.size(), "miou");
  require_nonempty(label_masks.size(), "miou");
  if (num_classes <= 0) throw std::invalid_argument("miou: num_classes must be positive");
  std::vector<size_t> inter(num_classes, 0), uni(num_classes, 0);
  for (size_t i = 0; i < label_masks.size(); ++i) {
    require_same_length(label_masks[i].size(), pred_masks[i].size(), "miou");
    require_classes_in_range(label_masks[i], num_classes, "miou");
    require_classes_in_range(pred_masks[i], num_classes, "miou");
    for (size_t px = 0; px < label_masks[i].size(); ++px) {
      const int l = label_masks[i][px];
      const int p = pred_masks[i][px];
      if (l == p) {
        inter[l] += 1;
        uni[l] += 1;
      } else {
        uni[l] += 1;
        uni[p] += 1;
      }
    }
  }
  MiouResult res;
  res.per_class_iou.resize(num_classes, 0.0);
  res.present.resize(num_classes, 0);
  double sum = 0.0;
  size_t counted = 0;
  for (int c = 0; c < num_classes; ++c) {
    if (uni[c] == 0) continue;  // absent in both labels and predictions
    res.present[c] = 1;
    res.per_class_iou[c] = static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
    sum += res.per_class_iou[c];
    ++counted;
  }
  if (counted == 0) throw std::invalid_argument("miou: no class occurs in labels or predictions");
  res.miou = sum / static_cast<double>(counted);
  return res;
}

}  // namespace mmim
