#include "cilforge/evaluation.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <boost/multiprecision/cpp_int.hpp>

#include "cilforge/errors.hpp"

namespace cilforge {

namespace fs = std::filesystem;
using boost::multiprecision::cpp_rational;

namespace {

cpp_rational exact(const Fraction& f) {
    return cpp_rational(f.correct, f.total);
}

nlohmann::json fraction_json(const Fraction& f) { return nlohmann::json::array({f.correct, f.total}); }

Fraction fraction_from(const nlohmann::json& j) { return {j.at(0).get<int64_t>(), j.at(1).get<int64_t>()}; }

std::vector<double> values(const std::vector<Fraction>& fs) {
    std::vector<double> v;
    for (const auto& f : fs) v.push_back(f.value());
    return v;
}

const Fraction& overall(const PhaseMetrics& m, bool ncm) { return ncm ? m.acc_ncm : m.acc_overall; }

// The decimal a double prints as (shortest round trip), as an exact rational:
// 0.9 -> 9/10. Accuracies read back from JSON are handled as the decimals
// that were written, so hand arithmetic on them is reproduced exactly.
cpp_rational decimal_exact(double v) {
    if (!std::isfinite(v)) throw InputError("metrics: non-finite accuracy value");
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    const std::string text(buf, res.ptr);
    const auto e = text.find_first_of("eE");
    const std::string mantissa = text.substr(0, e);
    int64_t exponent = e == std::string::npos ? 0 : std::stoll(text.substr(e + 1));
    boost::multiprecision::cpp_int digits = 0;
    bool negative = false;
    bool after_point = false;
    for (char c : mantissa) {
        if (c == '-') {
            negative = true;
        } else if (c == '.') {
            after_point = true;
        } else {
            digits = digits * 10 + (c - '0');
            if (after_point) --exponent;
        }
    }
    boost::multiprecision::cpp_int scale = 1;
    for (int64_t i = 0; i < std::abs(exponent); ++i) scale *= 10;
    cpp_rational r = exponent >= 0 ? cpp_rational(digits * scale) : cpp_rational(digits, scale);
    return negative ? cpp_rational(-r) : r;
}

// Exact overall accuracy of a phase: counts when present, else the float.
cpp_rational overall_exact(const PhaseMetrics& m, bool ncm) {
    const auto& f = overall(m, ncm);
    if (f.total > 0) return exact(f);
    return decimal_exact(m.overall_float.value_or(0.0));
}

}  // namespace

std::vector<std::vector<double>> MetricsLog::accuracy_matrix() const {
    std::vector<std::vector<double>> acc;
    for (const auto& p : phases) acc.push_back(values(p.acc_per_task));
    return acc;
}

std::vector<std::vector<double>> MetricsLog::ncm_accuracy_matrix() const {
    std::vector<std::vector<double>> acc;
    for (const auto& p : phases) acc.push_back(values(p.acc_ncm_per_task));
    return acc;
}

nlohmann::json to_json(const MetricsLog& log) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& p : log.phases) {
        nlohmann::json row;
        row["phase"] = p.phase;
        row["seen_classes"] = p.seen_classes;
        row["acc_overall"] = p.acc_overall.value();
        row["acc_overall_exact"] = fraction_json(p.acc_overall);
        row["acc_ncm"] = p.acc_ncm.value();
        row["acc_ncm_exact"] = fraction_json(p.acc_ncm);
        row["acc_per_task"] = values(p.acc_per_task);
        row["acc_ncm_per_task"] = values(p.acc_ncm_per_task);
        nlohmann::json per = nlohmann::json::array();
        for (const auto& f : p.acc_per_task) per.push_back(fraction_json(f));
        row["acc_per_task_exact"] = per;
        per = nlohmann::json::array();
        for (const auto& f : p.acc_ncm_per_task) per.push_back(fraction_json(f));
        row["acc_ncm_per_task_exact"] = per;
        const auto& first = log.phases.front();
        if (!first.acc_per_task.empty() && !p.acc_per_task.empty()) {
            row["forgetting_task0"] = forgetting_rate(first.acc_per_task.front(), p.acc_per_task.front()).value;
        } else {
            row["forgetting_task0"] = nullptr;
        }
        row["lambda_used"] = p.lambda_used;
        row["wall_clock_s"] = p.wall_clock_s;
        rows.push_back(row);
    }
    nlohmann::json j{{"seed", log.seed}, {"config_hash", log.config_hash}, {"phases", rows}};
    if (!log.phases.empty()) {
        const auto f = forgetting_rate(log);
        const auto f_ncm = forgetting_rate(log, true);
        j["summary"] = {{"average_accuracy", average_incremental_accuracy(log)},
                        {"last_accuracy", last_accuracy(log)},
                        {"forgetting", f.value},
                        {"forgetting_defined", f.defined},
                        {"average_accuracy_ncm", average_incremental_accuracy(log, true)},
                        {"last_accuracy_ncm", last_accuracy(log, true)},
                        {"forgetting_ncm", f_ncm.value}};
    }
    return j;
}

MetricsLog metrics_from_json(const nlohmann::json& j) {
    MetricsLog log;
    log.seed = j.value("seed", uint64_t{0});
    log.config_hash = j.value("config_hash", std::string{});
    for (const auto& row : j.at("phases")) {
        PhaseMetrics p;
        p.phase = row.at("phase").get<int64_t>();
        p.seen_classes = row.value("seen_classes", int64_t{0});
        if (row.contains("acc_overall_exact")) {
            p.acc_overall = fraction_from(row.at("acc_overall_exact"));
        } else {
            p.overall_float = row.at("acc_overall").get<double>();
        }
        if (row.contains("acc_ncm_exact")) p.acc_ncm = fraction_from(row.at("acc_ncm_exact"));
        if (row.contains("acc_per_task_exact")) {
            for (const auto& f : row.at("acc_per_task_exact")) p.acc_per_task.push_back(fraction_from(f));
        } else if (row.contains("acc_per_task") && !row.at("acc_per_task").empty()) {
            p.task0_float = row.at("acc_per_task").at(0).get<double>();
        }
        if (row.contains("acc_ncm_per_task_exact")) {
            for (const auto& f : row.at("acc_ncm_per_task_exact")) p.acc_ncm_per_task.push_back(fraction_from(f));
        }
        p.lambda_used = row.value("lambda_used", 0.0);
        p.wall_clock_s = row.value("wall_clock_s", 0.0);
        log.phases.push_back(std::move(p));
    }
    return log;
}

MetricsLog load_metrics(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw StateError("metrics file not found: " + file.string());
    return metrics_from_json(nlohmann::json::parse(in));
}

void save_metrics(const fs::path& file, const MetricsLog& log) {
    const auto tmp = fs::path(file.string() + ".tmp");
    {
        std::ofstream out(tmp);
        out << to_json(log).dump(2) << "\n";
    }
    fs::rename(tmp, file);
}

PhaseMetrics evaluate_phase(NestBackbone& backbone, CosineHead& head, const ExemplarMemory& memory,
                            const LabeledSet& test_seen, const PhasePlan& plan, int64_t t, const Dataset& stats,
                            int64_t batch_size) {
    torch::NoGradGuard no_grad;
    const bool was_training = backbone->is_training();
    backbone->eval();
    head->eval();

    PhaseMetrics m;
    m.phase = t;
    m.seen_classes = plan.seen_classes(t);
    m.acc_per_task.assign(static_cast<size_t>(t + 1), Fraction{});
    m.acc_ncm_per_task.assign(static_cast<size_t>(t + 1), Fraction{});
    std::vector<int64_t> preds;
    std::vector<int64_t> labels;

    const auto n = test_seen.size();
    for (int64_t start = 0; start < n; start += batch_size) {
        const auto len = std::min(batch_size, n - start);
        auto x = to_model_input(test_seen.images.narrow(0, start, len), stats);
        auto feats = backbone->extract_features(x).pooled;
        auto soft = head->forward(feats).argmax(1).contiguous();
        std::vector<int64_t> ncm;
        if (!memory.means().empty()) ncm = ncm_predict(feats, memory.means());
        auto lab = test_seen.labels.narrow(0, start, len).contiguous();
        const auto* l = lab.data_ptr<int64_t>();
        const auto* s = soft.data_ptr<int64_t>();
        for (int64_t i = 0; i < len; ++i) {
            const auto task = static_cast<size_t>(plan.task_of(l[i]));
            const bool ok = s[i] == l[i];
            m.acc_overall.correct += ok;
            m.acc_overall.total += 1;
            m.acc_per_task[task].correct += ok;
            m.acc_per_task[task].total += 1;
            if (!ncm.empty()) {
                const bool ok_ncm = ncm[static_cast<size_t>(i)] == l[i];
                m.acc_ncm.correct += ok_ncm;
                m.acc_ncm.total += 1;
                m.acc_ncm_per_task[task].correct += ok_ncm;
                m.acc_ncm_per_task[task].total += 1;
            }
            preds.push_back(s[i]);
            labels.push_back(l[i]);
        }
    }
    m.confusion = confusion_matrix(preds, labels, m.seen_classes);
    if (was_training) {
        backbone->train();
        head->train();
    }
    return m;
}

double average_incremental_accuracy(const MetricsLog& log, bool ncm) {
    if (log.phases.empty()) throw StateError("average accuracy of an empty metrics log");
    cpp_rational sum = 0;
    for (const auto& p : log.phases) sum += overall_exact(p, ncm);
    sum /= static_cast<int64_t>(log.phases.size());
    return sum.convert_to<double>();
}

double last_accuracy(const MetricsLog& log, bool ncm) {
    if (log.phases.empty()) throw StateError("last accuracy of an empty metrics log");
    const auto& p = log.phases.back();
    return overall(p, ncm).total > 0 ? overall(p, ncm).value() : p.overall_float.value_or(0.0);
}

Forgetting forgetting_rate(const Fraction& task0_at_0, const Fraction& task0_at_n) {
    if (task0_at_0.total == 0 || task0_at_n.total == 0) return {};
    cpp_rational diff = (exact(task0_at_0) - exact(task0_at_n)) * 100;
    return {diff.convert_to<double>(), true};
}

double forgetting_rate(double task0_at_0, double task0_at_n) {
    const cpp_rational diff = (decimal_exact(task0_at_0) - decimal_exact(task0_at_n)) * 100;
    return diff.convert_to<double>();
}

Forgetting forgetting_rate(const MetricsLog& log, bool ncm) {
    if (log.phases.empty()) throw StateError("forgetting rate of an empty metrics log");
    if (log.phases.size() == 1) return {0.0, false};
    const auto& first = log.phases.front();
    const auto& last = log.phases.back();
    const auto& per0 = ncm ? first.acc_ncm_per_task : first.acc_per_task;
    const auto& perN = ncm ? last.acc_ncm_per_task : last.acc_per_task;
    if (!per0.empty() && !perN.empty()) {
        auto f = forgetting_rate(per0.front(), perN.front());
        if (f.defined) return f;
    }
    if (first.task0_float && last.task0_float) {
        return {forgetting_rate(*first.task0_float, *last.task0_float), true};
    }
    return {0.0, false};
}

Matrix confusion_matrix(const std::vector<int64_t>& preds, const std::vector<int64_t>& labels, int64_t num_classes) {
    if (preds.size() != labels.size()) throw InputError("confusion_matrix: preds and labels differ in length");
    Matrix m(static_cast<size_t>(num_classes), std::vector<int64_t>(static_cast<size_t>(num_classes), 0));
    for (size_t i = 0; i < preds.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes || preds[i] < 0 || preds[i] >= num_classes) {
            throw InputError("confusion_matrix: entry (" + std::to_string(labels[i]) + ", " +
                             std::to_string(preds[i]) + ") outside [0, " + std::to_string(num_classes) + ")");
        }
        ++m[static_cast<size_t>(labels[i])][static_cast<size_t>(preds[i])];
    }
    return m;
}

void write_confusion_csv(const fs::path& file, const Matrix& m) {
    std::ofstream out(file);
    for (const auto& row : m) {
        for (size_t j = 0; j < row.size(); ++j) out << (j ? "," : "") << row[j];
        out << "\n";
    }
}

Matrix read_confusion_csv(const fs::path& file) {
    std::ifstream in(file);
    if (!in) throw StateError("confusion file not found: " + file.string());
    Matrix m;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<int64_t> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) row.push_back(std::stoll(cell));
        m.push_back(std::move(row));
    }
    return m;
}

nlohmann::json summarize_repeats(const std::vector<MetricsLog>& runs) {
    if (runs.empty()) throw StateError("summarize_repeats: no runs");
    nlohmann::json phases = nlohmann::json::array();
    const auto count = runs.front().phases.size();
    auto stats = [](const std::vector<double>& v) {
        double mean = 0.0;
        for (auto x : v) mean += x;
        mean /= static_cast<double>(v.size());
        double var = 0.0;
        for (auto x : v) var += (x - mean) * (x - mean);
        const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
        return std::pair{mean, sd};
    };
    for (size_t t = 0; t < count; ++t) {
        std::vector<double> acc;
        std::vector<double> ncm;
        for (const auto& r : runs) {
            if (r.phases.size() != count) throw StateError("summarize_repeats: runs have different phase counts");
            acc.push_back(r.phases[t].acc_overall.value());
            ncm.push_back(r.phases[t].acc_ncm.value());
        }
        auto [m, s] = stats(acc);
        auto [mn, sn] = stats(ncm);
        phases.push_back({{"phase", t}, {"acc_overall_mean", m}, {"acc_overall_std", s},
                          {"acc_ncm_mean", mn}, {"acc_ncm_std", sn}});
    }
    std::vector<double> avg;
    std::vector<double> last;
    std::vector<double> forget;
    for (const auto& r : runs) {
        avg.push_back(average_incremental_accuracy(r));
        last.push_back(last_accuracy(r));
        forget.push_back(forgetting_rate(r).value);
    }
    auto [am, as] = stats(avg);
    auto [lm, ls] = stats(last);
    auto [fm, fsd] = stats(forget);
    return {{"repeats", runs.size()},
            {"phases", phases},
            {"average_accuracy_mean", am},
            {"average_accuracy_std", as},
            {"last_accuracy_mean", lm},
            {"last_accuracy_std", ls},
            {"forgetting_mean", fm},
            {"forgetting_std", fsd}};
}

}  // namespace cilforge
