#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dcswin/error.hpp"

namespace dcswin {

/// Default ISPRS-style names for K = 6; "class<k>" otherwise.
std::vector<std::string> default_class_names(int classes);

/// counts[t][p] = pixels of true class t predicted as p.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int classes, std::optional<int> ignore_label = std::nullopt,
                             std::vector<std::string> class_names = {});

    /// Labels must lie in [0, K) or equal the ignore label; pixels whose true
    /// label is ignored are skipped. Throws Error on size mismatch or range.
    void accumulate(std::span<const int32_t> truth, std::span<const int32_t> pred);
    /// Adds another matrix of the same K.
    void merge(const ConfusionMatrix& other);

    int classes() const { return classes_; }
    const std::vector<std::string>& class_names() const { return names_; }
    std::optional<int> ignore_label() const { return ignore_; }
    int64_t count(int truth, int pred) const { return counts_[std::size_t(truth) * classes_ + pred]; }
    int64_t total() const;
    int64_t tp(int k) const { return count(k, k); }
    int64_t fp(int k) const;
    int64_t fn(int k) const;
    int64_t tn(int k) const { return total() - tp(k) - fp(k) - fn(k); }
    /// A class takes part in the means when TP + FP + FN > 0.
    bool present(int k) const { return tp(k) + fp(k) + fn(k) > 0; }

private:
    int classes_;
    std::optional<int> ignore_;
    std::vector<std::string> names_;
    std::vector<int64_t> counts_;
};

/// trace / total. Throws Error on an empty matrix.
double overall_accuracy(const ConfusionMatrix& cm);

/// TP / (TP + FP + FN); 0 for classes that are not present.
std::vector<double> per_class_iou(const ConfusionMatrix& cm);
/// Mean over present classes.
double mean_iou(const ConfusionMatrix& cm);

struct F1Report {
    std::vector<double> precision, recall, f1;
    double mean_precision = 0, mean_recall = 0, mean_f1 = 0;
    /// One line per 0/0 ratio that was reported as 0.
    std::vector<std::string> warnings;
};

/// Per-class precision, recall and F1 = 2TP / (2TP + FP + FN); macro means
/// over present classes.
F1Report f1_scores(const ConfusionMatrix& cm);

/// Aligned text table: per-class F1, Mean F1, OA, mIoU (percent).
std::string format_report_table(const ConfusionMatrix& cm);
/// One `name<TAB>value` line per metric, 4 decimals, same order as the table.
std::string format_report_tsv(const ConfusionMatrix& cm);

}  // namespace dcswin
