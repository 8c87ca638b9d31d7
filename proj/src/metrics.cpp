#include "dcswin/metrics.hpp"

#include <cstdio>
#include <sstream>

#include "dcswin/tensor.hpp"

namespace dcswin {

std::vector<std::string> default_class_names(int classes)
{
    if (classes == 6) return {"impervious", "building", "low_veg", "tree", "car", "clutter"};
    std::vector<std::string> names;
    for (int k = 0; k < classes; ++k) names.push_back("class" + std::to_string(k));
    return names;
}

ConfusionMatrix::ConfusionMatrix(int classes, std::optional<int> ignore_label, std::vector<std::string> class_names)
    : classes_(classes), ignore_(ignore_label), names_(std::move(class_names)),
      counts_(static_cast<std::size_t>(classes) * std::max(classes, 0), 0)
{
    if (classes < 1) throw Error("confusion matrix needs at least one class");
    if (names_.empty()) names_ = default_class_names(classes);
    if (static_cast<int>(names_.size()) != classes) throw Error("class name count does not match K");
}

void ConfusionMatrix::accumulate(std::span<const int32_t> truth, std::span<const int32_t> pred)
{
    if (truth.size() != pred.size()) {
        throw Error("label maps differ in size: " + std::to_string(truth.size()) + " vs " + std::to_string(pred.size()));
    }
    std::vector<int64_t> local(counts_.size(), 0);
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const int32_t t = truth[i], p = pred[i];
        if (ignore_ && t == *ignore_) continue;
        if (t < 0 || t >= classes_) throw Error("true label " + std::to_string(t) + " outside [0, K)");
        if (p < 0 || p >= classes_) throw Error("predicted label " + std::to_string(p) + " outside [0, K)");
        ++local[std::size_t(t) * classes_ + p];
    }
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += local[i];
}

void ConfusionMatrix::merge(const ConfusionMatrix& other)
{
    if (other.classes_ != classes_) throw Error("cannot merge confusion matrices with different K");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

int64_t ConfusionMatrix::total() const
{
    int64_t n = 0;
    for (int64_t c : counts_) n += c;
    return n;
}

int64_t ConfusionMatrix::fp(int k) const
{
    int64_t col = 0;
    for (int t = 0; t < classes_; ++t) col += count(t, k);
    return col - tp(k);
}

int64_t ConfusionMatrix::fn(int k) const
{
    int64_t row = 0;
    for (int p = 0; p < classes_; ++p) row += count(k, p);
    return row - tp(k);
}

double overall_accuracy(const ConfusionMatrix& cm)
{
    const int64_t total = cm.total();
    if (total == 0) throw Error("overall accuracy of an empty confusion matrix");
    int64_t trace = 0;
    for (int k = 0; k < cm.classes(); ++k) trace += cm.tp(k);
    return double(trace) / double(total);
}

std::vector<double> per_class_iou(const ConfusionMatrix& cm)
{
    std::vector<double> iou(static_cast<std::size_t>(cm.classes()), 0.0);
    for (int k = 0; k < cm.classes(); ++k) {
        const int64_t denom = cm.tp(k) + cm.fp(k) + cm.fn(k);
        if (denom > 0) iou[k] = double(cm.tp(k)) / double(denom);
    }
    return iou;
}

double mean_iou(const ConfusionMatrix& cm)
{
    const auto iou = per_class_iou(cm);
    double s = 0;
    int n = 0;
    for (int k = 0; k < cm.classes(); ++k) {
        if (!cm.present(k)) continue;
        s += iou[k];
        ++n;
    }
    return n ? s / n : 0.0;
}

F1Report f1_scores(const ConfusionMatrix& cm)
{
    F1Report r;
    const int K = cm.classes();
    r.precision.assign(K, 0.0);
    r.recall.assign(K, 0.0);
    r.f1.assign(K, 0.0);
    int n = 0;
    for (int k = 0; k < K; ++k) {
        const double tp = double(cm.tp(k)), fp = double(cm.fp(k)), fn = double(cm.fn(k));
        const auto& name = cm.class_names()[k];
        if (tp + fp > 0) {
            r.precision[k] = tp / (tp + fp);
        } else {
            r.warnings.push_back("precision of " + name + " is 0/0 (no predictions), reported as 0");
        }
        if (tp + fn > 0) {
            r.recall[k] = tp / (tp + fn);
        } else {
            r.warnings.push_back("recall of " + name + " is 0/0 (no ground truth), reported as 0");
        }
        if (2 * tp + fp + fn > 0) {
            r.f1[k] = 2 * tp / (2 * tp + fp + fn);
        } else {
            r.warnings.push_back("F1 of " + name + " is 0/0, reported as 0 and left out of the means");
        }
        if (!cm.present(k)) continue;
        r.mean_precision += r.precision[k];
        r.mean_recall += r.recall[k];
        r.mean_f1 += r.f1[k];
        ++n;
    }
    if (n) {
        r.mean_precision /= n;
        r.mean_recall /= n;
        r.mean_f1 /= n;
    }
    return r;
}

namespace {

std::vector<std::pair<std::string, double>> report_rows(const ConfusionMatrix& cm)
{
    const auto f1 = f1_scores(cm);
    std::vector<std::pair<std::string, double>> rows;
    for (int k = 0; k < cm.classes(); ++k) rows.emplace_back("f1_" + cm.class_names()[k], f1.f1[k]);
    rows.emplace_back("mean_f1", f1.mean_f1);
    rows.emplace_back("oa", overall_accuracy(cm));
    rows.emplace_back("miou", mean_iou(cm));
    return rows;
}

}  // namespace

std::string format_report_table(const ConfusionMatrix& cm)
{
    const auto rows = report_rows(cm);
    std::ostringstream head, body;
    for (const auto& [name, value] : rows) {
        const std::size_t width = std::max<std::size_t>(name.size(), 7) + 2;
        char cell[64];
        std::snprintf(cell, sizeof cell, "%*.2f", int(width), value * 100.0);
        head << std::string(width - name.size(), ' ') << name;
        body << cell;
    }
    return head.str() + "\n" + body.str() + "\n";
}

std::string format_report_tsv(const ConfusionMatrix& cm)
{
    std::ostringstream os;
    for (const auto& [name, value] : report_rows(cm)) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.4f", value);
        os << name << '\t' << buf << '\n';
    }
    return os.str();
}

}  // namespace dcswin
