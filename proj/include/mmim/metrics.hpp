#pragma once

#include <cstdint>
#include <vector>

namespace mmim {

double metric_accuracy(const std::vector<int>& labels, const std::vector<int>& preds);

struct MacroF1Result {
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;
  /// Classes with zero support and zero predictions; their F1 is defined
  /// as 0 and flagged here.
  std::vector<uint8_t> undefined;
};

MacroF1Result metric_macro_f1_detailed(const std::vector<int>& labels, const std::vector<int>& preds,
                                       int num_classes);
double metric_macro_f1(const std::vector<int>& labels, const std::vector<int>& preds, int num_classes);
double metric_micro_f1(const std::vector<int>& labels, const std::vector<int>& preds, int num_classes);

/// Macro F1 over independent binary labels (multi-label classification).
double metric_macro_f1_multilabel(const std::vector<std::vector<int>>& labels,
                                  const std::vector<std::vector<int>>& preds);

/// Thresholds per-class logits into 0/1 predictions.
std::vector<std::vector<int>> multilabel_predictions(const std::vector<std::vector<double>>& logits,
                                                     double threshold = 0.0);

/// Probability that a random positive outscores a random negative, ties
/// counted one half (Mann-Whitney). Requires both classes present.
double metric_roc_auc(const std::vector<int>& labels, const std::vector<double>& scores);

/// Average precision via the interpolation-free sum of (R_k - R_{k-1}) * P_k
/// down the ranking. Ties are broken by original index (stable order).
double metric_pr_auc(const std::vector<int>& labels, const std::vector<double>& scores);

/// Macro mean of per-class average precision. Every class needs at least
/// one positive.
double metric_map(const std::vector<std::vector<int>>& labels_per_class,
                  const std::vector<std::vector<double>>& scores_per_class);

/// Micro average precision: all class/sample pairs pooled into one ranking.
double metric_micro_ap(const std::vector<std::vector<int>>& labels_per_class,
                       const std::vector<std::vector<double>>& scores_per_class);

struct MiouResult {
  double miou = 0.0;
  std::vector<double> per_class_iou;
  /// Classes seen in at least one label or prediction pixel; absent classes
  /// are excluded from the mean.
  std::vector<uint8_t> present;
};

/// Per-class IoU accumulated over the whole dataset, then averaged over the
/// classes that occur.
MiouResult metric_miou(const std::vector<std::vector<int>>& label_masks,
                       const std::vector<std::vector<int>>& pred_masks, int num_classes);

}  // namespace mmim
