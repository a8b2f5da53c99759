#include "cilforge/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

#include "cilforge/errors.hpp"

namespace cilforge {

namespace {

// ---------------------------------------------------------------------------
// Values of the TOML subset: strings, booleans, integers, floats and flat
// arrays of those.

struct Value {
    enum class Kind { String, Bool, Integer, Float, Array } kind = Kind::String;
    std::string text;  // string contents, or the numeric literal
    bool boolean = false;
    std::vector<Value> items;
};

std::string kind_name(Value::Kind k) {
    switch (k) {
        case Value::Kind::String: return "string";
        case Value::Kind::Bool: return "boolean";
        case Value::Kind::Integer: return "integer";
        case Value::Kind::Float: return "float";
        case Value::Kind::Array: return "array";
    }
    return "value";
}

class ValueParser {
public:
    explicit ValueParser(std::string_view text) : s_(text) {}

    Value parse_all() {
        skip_space();
        Value v = parse_value();
        skip_space();
        if (pos_ != s_.size() && s_[pos_] != '#') fail("unexpected trailing characters '" + std::string(s_.substr(pos_)) + "'");
        return v;
    }

private:
    [[noreturn]] void fail(const std::string& what) const { throw ConfigError(what); }

    void skip_space() {
        while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t')) ++pos_;
    }

    Value parse_value() {
        if (pos_ >= s_.size()) fail("missing value");
        const char c = s_[pos_];
        if (c == '"') return parse_string();
        if (c == '[') return parse_array();
        return parse_scalar();
    }

    Value parse_string() {
        Value v;
        v.kind = Value::Kind::String;
        ++pos_;
        while (pos_ < s_.size() && s_[pos_] != '"') {
            char c = s_[pos_++];
            if (c == '\\') {
                if (pos_ >= s_.size()) fail("unterminated escape");
                const char e = s_[pos_++];
                switch (e) {
                    case '"': c = '"'; break;
                    case '\\': c = '\\'; break;
                    case 'n': c = '\n'; break;
                    case 't': c = '\t'; break;
                    default: fail(std::string("unsupported escape \\") + e);
                }
            }
            v.text.push_back(c);
        }
        if (pos_ >= s_.size()) fail("unterminated string");
        ++pos_;
        return v;
    }

    Value parse_array() {
        Value v;
        v.kind = Value::Kind::Array;
        ++pos_;
        skip_space();
        if (pos_ < s_.size() && s_[pos_] == ']') {
            ++pos_;
            return v;
        }
        while (true) {
            skip_space();
            Value item = parse_value();
            if (item.kind == Value::Kind::Array) fail("nested arrays are not supported");
            v.items.push_back(std::move(item));
            skip_space();
            if (pos_ >= s_.size()) fail("unterminated array");
            if (s_[pos_] == ',') {
                ++pos_;
                skip_space();
                if (pos_ < s_.size() && s_[pos_] == ']') {
                    ++pos_;
                    return v;
                }
                continue;
            }
            if (s_[pos_] == ']') {
                ++pos_;
                return v;
            }
            fail("expected ',' or ']' in array");
        }
    }

    Value parse_scalar() {
        const size_t start = pos_;
        while (pos_ < s_.size() && s_[pos_] != ',' && s_[pos_] != ']' && s_[pos_] != ' ' && s_[pos_] != '\t' &&
               s_[pos_] != '#') {
            ++pos_;
        }
        std::string token(s_.substr(start, pos_ - start));
        Value v;
        if (token == "true" || token == "false") {
            v.kind = Value::Kind::Bool;
            v.boolean = token == "true";
            v.text = token;
            return v;
        }
        std::string digits;
        for (char c : token) {
            if (c != '_') digits.push_back(c);
        }
        int64_t i = 0;
        auto [ip, iec] = std::from_chars(digits.data(), digits.data() + digits.size(), i);
        if (iec == std::errc() && ip == digits.data() + digits.size() && !digits.empty()) {
            v.kind = Value::Kind::Integer;
            v.text = digits;
            return v;
        }
        double d = 0.0;
        auto [dp, dec] = std::from_chars(digits.data(), digits.data() + digits.size(), d);
        if (dec == std::errc() && dp == digits.data() + digits.size() && !digits.empty()) {
            v.kind = Value::Kind::Float;
            v.text = digits;
            return v;
        }
        fail("cannot parse value '" + token + "' (strings must be quoted)");
    }

    std::string_view s_;
    size_t pos_ = 0;
};

int64_t as_int(const Value& v) {
    if (v.kind != Value::Kind::Integer) throw ConfigError("expected an integer, got " + kind_name(v.kind));
    return std::stoll(v.text);
}

double as_double(const Value& v) {
    if (v.kind != Value::Kind::Integer && v.kind != Value::Kind::Float) {
        throw ConfigError("expected a number, got " + kind_name(v.kind));
    }
    double d = 0.0;
    std::from_chars(v.text.data(), v.text.data() + v.text.size(), d);
    return d;
}

bool as_bool(const Value& v) {
    if (v.kind != Value::Kind::Bool) throw ConfigError("expected true or false, got " + kind_name(v.kind));
    return v.boolean;
}

std::string as_string(const Value& v) {
    if (v.kind != Value::Kind::String) throw ConfigError("expected a quoted string, got " + kind_name(v.kind));
    return v.text;
}

std::vector<int64_t> as_int_list(const Value& v) {
    if (v.kind == Value::Kind::Integer) return {as_int(v)};
    if (v.kind != Value::Kind::Array) throw ConfigError("expected an integer or an array of integers");
    std::vector<int64_t> out;
    for (const auto& item : v.items) out.push_back(as_int(item));
    return out;
}

std::string show_double(double d) {
    // Shortest representation that reads back to the same double.
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, d);
    std::string s(buf, p);
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

std::string show_string(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            default: out.push_back(c);
        }
    }
    return out + "\"";
}

std::string show_int_list(const std::vector<int64_t>& v) {
    std::string out = "[";
    for (size_t i = 0; i < v.size(); ++i) out += (i ? ", " : "") + std::to_string(v[i]);
    return out + "]";
}

// ---------------------------------------------------------------------------
// Schema

struct Field {
    std::string section;
    std::string key;
    std::function<void(ExperimentConfig&, const Value&)> set;
    std::function<std::string(const ExperimentConfig&)> show;
};

template <typename Ref>
Field int_field(std::string section, std::string key, Ref ref) {
    return {section, key, [ref](ExperimentConfig& c, const Value& v) { ref(c) = as_int(v); },
            [ref](const ExperimentConfig& c) { return std::to_string(ref(const_cast<ExperimentConfig&>(c))); }};
}

template <typename Ref>
Field uint_field(std::string section, std::string key, Ref ref) {
    return {section, key,
            [ref, section, key](ExperimentConfig& c, const Value& v) {
                const auto i = as_int(v);
                if (i < 0) throw ConfigError("expected a non-negative integer");
                ref(c) = static_cast<uint64_t>(i);
            },
            [ref](const ExperimentConfig& c) { return std::to_string(ref(const_cast<ExperimentConfig&>(c))); }};
}

template <typename Ref>
Field double_field(std::string section, std::string key, Ref ref) {
    return {section, key, [ref](ExperimentConfig& c, const Value& v) { ref(c) = as_double(v); },
            [ref](const ExperimentConfig& c) { return show_double(ref(const_cast<ExperimentConfig&>(c))); }};
}

template <typename Ref>
Field bool_field(std::string section, std::string key, Ref ref) {
    return {section, key, [ref](ExperimentConfig& c, const Value& v) { ref(c) = as_bool(v); },
            [ref](const ExperimentConfig& c) {
                return std::string(ref(const_cast<ExperimentConfig&>(c)) ? "true" : "false");
            }};
}

template <typename Ref>
Field string_field(std::string section, std::string key, Ref ref) {
    return {section, key, [ref](ExperimentConfig& c, const Value& v) { ref(c) = as_string(v); },
            [ref](const ExperimentConfig& c) { return show_string(ref(const_cast<ExperimentConfig&>(c))); }};
}

template <typename Ref>
Field int_list_field(std::string section, std::string key, Ref ref) {
    return {section, key, [ref](ExperimentConfig& c, const Value& v) { ref(c) = as_int_list(v); },
            [ref](const ExperimentConfig& c) { return show_int_list(ref(const_cast<ExperimentConfig&>(c))); }};
}

using C = ExperimentConfig;

const std::vector<Field>& schema() {
    static const std::vector<Field> fields = [] {
        std::vector<Field> f;
        f.push_back(string_field("experiment", "name", [](C& c) -> std::string& { return c.experiment.name; }));
        f.push_back(string_field("experiment", "output_dir", [](C& c) -> std::string& { return c.experiment.output_dir; }));
        f.push_back(int_field("experiment", "seed", [](C& c) -> int64_t& { return c.experiment.seed; }));
        f.push_back(int_field("experiment", "repeats", [](C& c) -> int64_t& { return c.experiment.repeats; }));
        f.push_back(bool_field("experiment", "deterministic", [](C& c) -> bool& { return c.experiment.deterministic; }));
        f.push_back(int_field("experiment", "threads", [](C& c) -> int64_t& { return c.experiment.threads; }));
        f.push_back(bool_field("experiment", "verbose", [](C& c) -> bool& { return c.experiment.verbose; }));

        f.push_back(string_field("data", "dataset", [](C& c) -> std::string& { return c.data.dataset; }));
        f.push_back(string_field("data", "root", [](C& c) -> std::string& { return c.data.root; }));
        f.push_back(int_field("data", "train_per_class", [](C& c) -> int64_t& { return c.data.train_per_class; }));
        f.push_back(int_field("data", "test_per_class", [](C& c) -> int64_t& { return c.data.test_per_class; }));
        f.push_back(int_field("data", "eval_batch_size", [](C& c) -> int64_t& { return c.data.eval_batch_size; }));
        f.push_back(int_field("data", "synthetic_classes", [](C& c) -> int64_t& { return c.data.synthetic_classes; }));
        f.push_back(int_field("data", "synthetic_train_per_class",
                              [](C& c) -> int64_t& { return c.data.synthetic_train_per_class; }));
        f.push_back(int_field("data", "synthetic_test_per_class",
                              [](C& c) -> int64_t& { return c.data.synthetic_test_per_class; }));
        f.push_back(int_field("data", "synthetic_seed", [](C& c) -> int64_t& { return c.data.synthetic_seed; }));

        f.push_back(int_field("plan", "base_classes", [](C& c) -> int64_t& { return c.plan.base_classes; }));
        f.push_back(double_field("plan", "base_fraction", [](C& c) -> double& { return c.plan.base_fraction; }));
        f.push_back(int_field("plan", "increment", [](C& c) -> int64_t& { return c.plan.increment; }));
        f.push_back(int_field("plan", "seed", [](C& c) -> int64_t& { return c.plan.seed; }));

        f.push_back(int_field("backbone", "patch_size", [](C& c) -> int64_t& { return c.backbone.patch_size; }));
        f.push_back(int_field("backbone", "num_hierarchies", [](C& c) -> int64_t& { return c.backbone.num_hierarchies; }));
        f.push_back(int_list_field("backbone", "embed_dims",
                                   [](C& c) -> std::vector<int64_t>& { return c.backbone.embed_dims; }));
        f.push_back(int_list_field("backbone", "heads", [](C& c) -> std::vector<int64_t>& { return c.backbone.heads; }));
        f.push_back(int_list_field("backbone", "blocks_per_level",
                                   [](C& c) -> std::vector<int64_t>& { return c.backbone.blocks_per_level; }));
        f.push_back(int_field("backbone", "image_size", [](C& c) -> int64_t& { return c.backbone.image_size; }));
        f.push_back(int_field("backbone", "channels", [](C& c) -> int64_t& { return c.backbone.channels; }));

        f.push_back(int_field("train", "epochs_per_phase", [](C& c) -> int64_t& { return c.train.epochs_per_phase; }));
        f.push_back(int_field("train", "batch_size", [](C& c) -> int64_t& { return c.train.batch_size; }));
        f.push_back(double_field("train", "base_lr", [](C& c) -> double& { return c.train.base_lr; }));
        f.push_back(double_field("train", "head_lr", [](C& c) -> double& { return c.train.head_lr; }));
        f.push_back(int_field("train", "warmup_epochs", [](C& c) -> int64_t& { return c.train.warmup_epochs; }));
        f.push_back(double_field("train", "weight_decay", [](C& c) -> double& { return c.train.weight_decay; }));
        f.push_back(double_field("train", "beta1", [](C& c) -> double& { return c.train.beta1; }));
        f.push_back(double_field("train", "beta2", [](C& c) -> double& { return c.train.beta2; }));
        f.push_back(double_field("train", "grad_clip", [](C& c) -> double& { return c.train.grad_clip; }));
        f.push_back(double_field("train", "mixup_alpha", [](C& c) -> double& { return c.train.mixup_alpha; }));
        f.push_back(bool_field("train", "mixup_base", [](C& c) -> bool& { return c.train.mixup_base; }));
        f.push_back(bool_field("train", "mixup_incremental", [](C& c) -> bool& { return c.train.mixup_incremental; }));
        f.push_back(bool_field("train", "augment", [](C& c) -> bool& { return c.train.augment; }));

        f.push_back(double_field("loss", "tau", [](C& c) -> double& { return c.train.weights.tau; }));
        f.push_back(double_field("loss", "lambda_base", [](C& c) -> double& { return c.train.weights.lambda; }));
        f.push_back(double_field("loss", "gamma", [](C& c) -> double& { return c.train.weights.gamma; }));
        f.push_back({"loss", "distill_scope",
                     [](C& c, const Value& v) { c.train.weights.distill_scope = distill_scope_from_string(as_string(v)); },
                     [](const C& c) { return show_string(to_string(c.train.weights.distill_scope)); }});
        f.push_back({"loss", "lambda_rule",
                     [](C& c, const Value& v) { c.train.lambda_rule = lambda_rule_from_string(as_string(v)); },
                     [](const C& c) { return show_string(to_string(c.train.lambda_rule)); }});
        f.push_back(bool_field("loss", "cam_detach_alpha", [](C& c) -> bool& { return c.train.cam_detach_alpha; }));

        f.push_back({"memory", "policy",
                     [](C& c, const Value& v) { c.memory.kind = budget_kind_from_string(as_string(v)); },
                     [](const C& c) { return show_string(c.memory.kind_name()); }});
        f.push_back(int_field("memory", "size", [](C& c) -> int64_t& { return c.memory.size; }));

        f.push_back(bool_field("plots", "enabled", [](C& c) -> bool& { return c.plots.enabled; }));
        f.push_back(int_field("plots", "cam_per_class", [](C& c) -> int64_t& { return c.plots.cam_per_class; }));
        return f;
    }();
    return fields;
}

const Field* find_field(const std::string& section, const std::string& key) {
    for (const auto& f : schema()) {
        if (f.section == section && f.key == key) return &f;
    }
    return nullptr;
}

bool section_exists(const std::string& section) {
    for (const auto& f : schema()) {
        if (f.section == section) return true;
    }
    return false;
}

void assign(ExperimentConfig& config, const std::string& section, const std::string& key, const Value& value,
            const std::string& where) {
    const Field* field = find_field(section, key);
    if (field == nullptr) {
        throw ConfigError(where + "unknown key '" + (section.empty() ? key : section + "." + key) + "'");
    }
    try {
        field->set(config, value);
    } catch (const ConfigError& e) {
        throw ConfigError(where + section + "." + key + ": " + e.what());
    }
}

std::string trim(std::string_view s) {
    size_t a = 0;
    size_t b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return std::string(s.substr(a, b - a));
}

bool valid_identifier(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s) {
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-')) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Presets

const std::map<std::string, std::string>& presets() {
    static const std::map<std::string, std::string> table = [] {
        // Small-scale paper setting (Section 4.1): NesT-Tiny, lambda 10, tau 1,
        // gamma 0.1, batch 128, exemplar-only distillation, 20 exemplars/class.
        const std::string cifar = R"([data]
dataset = "cifar100"
[plan]
base_classes = 50
[backbone]
patch_size = 1
num_hierarchies = 3
embed_dims = [192]
heads = [6]
blocks_per_level = [4]
image_size = 32
channels = 3
[train]
batch_size = 128
base_lr = 2.5e-4
head_lr = 2.5e-3
warmup_epochs = 10
mixup_base = true
mixup_incremental = false
[loss]
tau = 1.0
lambda_base = 10.0
gamma = 0.1
distill_scope = "exemplars_only"
[memory]
policy = "per_class"
size = 20
)";
        // Digits: S = 2, two classes per task, fixed memory of 4.4k.
        const std::string digits = R"([plan]
base_classes = 2
increment = 2
[backbone]
patch_size = 2
num_hierarchies = 3
embed_dims = [192]
heads = [6]
blocks_per_level = [4]
image_size = 32
[train]
epochs_per_phase = 150
batch_size = 128
warmup_epochs = 10
[loss]
tau = 1.0
lambda_base = 10.0
gamma = 0.1
distill_scope = "exemplars_only"
[memory]
policy = "fixed_total"
size = 4400
)";
        // ImageNet: S = 4, dims (96, 192, 384), depths (3, 6, 12), heads
        // (2, 2, 8), lambda 4, tau 0.3, gamma 0.05, all-sample distillation,
        // mixup in incremental phases, 20 warmup epochs.
        const std::string imagenet = R"([backbone]
patch_size = 4
num_hierarchies = 3
embed_dims = [96, 192, 384]
heads = [2, 2, 8]
blocks_per_level = [3, 6, 12]
image_size = 224
channels = 3
[train]
base_lr = 2.5e-4
head_lr = 2.5e-3
warmup_epochs = 20
mixup_base = true
mixup_incremental = true
[loss]
tau = 0.3
lambda_base = 4.0
gamma = 0.05
distill_scope = "all_samples"
[memory]
policy = "per_class"
size = 20
)";
        // Desk scale: tiny backbone, batch 64, <= 10 epochs per phase. With
        // a 2-class base the phase-0 features collapse onto two directions,
        // and the paper's lambda = 10 (compounding to ~110 by phase 4) pins
        // old features there; lambda_base = 0.5 keeps distillation useful.
        const std::string desk = R"([plan]
base_classes = 2
increment = 2
[backbone]
patch_size = 2
num_hierarchies = 3
embed_dims = [64]
heads = [2]
blocks_per_level = [1]
image_size = 32
channels = 1
[train]
epochs_per_phase = 5
batch_size = 64
base_lr = 1e-3
head_lr = 1e-2
warmup_epochs = 1
mixup_base = true
mixup_incremental = false
[loss]
tau = 1.0
lambda_base = 0.5
gamma = 0.1
distill_scope = "exemplars_only"
[memory]
policy = "per_class"
size = 20
[plots]
cam_per_class = 2
)";
        std::map<std::string, std::string> t;
        for (int c : {10, 5, 2}) {
            const auto epochs = c == 2 ? 150 : 250;
            t["cifar-b50-c" + std::to_string(c)] =
                "[experiment]\nname = \"cifar-b50-c" + std::to_string(c) + "\"\n" + cifar +
                "[plan]\nincrement = " + std::to_string(c) + "\n[train]\nepochs_per_phase = " +
                std::to_string(epochs) + "\n";
            t["imagenet100-b50-c" + std::to_string(c)] =
                "[experiment]\nname = \"imagenet100-b50-c" + std::to_string(c) + "\"\n" + imagenet +
                "[data]\ndataset = \"imagenet100\"\n[plan]\nbase_classes = 50\nincrement = " + std::to_string(c) +
                "\n[train]\nbatch_size = 384\nepochs_per_phase = " + std::to_string(epochs) + "\n";
        }
        t["imagenet1k-b500-c100"] = "[experiment]\nname = \"imagenet1k-b500-c100\"\n" + imagenet +
                                    "[data]\ndataset = \"imagenet1k\"\n[plan]\nbase_classes = 500\nincrement = 100\n"
                                    "[train]\nbatch_size = 1024\nepochs_per_phase = 250\n";
        t["mnist-2step"] = "[experiment]\nname = \"mnist-2step\"\n[data]\ndataset = \"mnist\"\n" + digits +
                           "[backbone]\nchannels = 1\n";
        t["svhn-2step"] = "[experiment]\nname = \"svhn-2step\"\n[data]\ndataset = \"svhn\"\n" + digits +
                          "[backbone]\nchannels = 3\n";
        t["desk-mnist"] = "[experiment]\nname = \"desk-mnist\"\nthreads = 1\n[data]\ndataset = \"mnist\"\n"
                          "train_per_class = 400\ntest_per_class = 100\n" + desk;
        t["desk-synthetic"] = "[experiment]\nname = \"desk-synthetic\"\nthreads = 1\n[data]\ndataset = \"synthetic\"\n"
                              "synthetic_classes = 10\nsynthetic_train_per_class = 200\n"
                              "synthetic_test_per_class = 50\n" + desk;
        return t;
    }();
    return table;
}

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 14695981039346656037ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

void ExperimentConfig::validate() const {
    if (experiment.name.empty() || experiment.name.find('/') != std::string::npos) {
        throw ConfigError("experiment.name must be a non-empty name without '/'");
    }
    if (experiment.output_dir.empty()) throw ConfigError("experiment.output_dir must not be empty");
    if (experiment.seed < 0) throw ConfigError("experiment.seed must be >= 0");
    if (experiment.repeats < 1) throw ConfigError("experiment.repeats must be >= 1");
    if (experiment.threads < 0) throw ConfigError("experiment.threads must be >= 0");
    static const std::vector<std::string> datasets{"mnist", "cifar100", "svhn", "imagenet100", "imagenet1k",
                                                   "synthetic"};
    if (std::find(datasets.begin(), datasets.end(), data.dataset) == datasets.end()) {
        throw ConfigError("data.dataset: unknown dataset '" + data.dataset +
                          "' (expected mnist, cifar100, svhn, imagenet100, imagenet1k or synthetic)");
    }
    if (data.train_per_class < 0) throw ConfigError("data.train_per_class must be >= 0");
    if (data.test_per_class < 0) throw ConfigError("data.test_per_class must be >= 0");
    if (data.eval_batch_size < 1) throw ConfigError("data.eval_batch_size must be >= 1");
    if (data.synthetic_classes < 1) throw ConfigError("data.synthetic_classes must be >= 1");
    if (data.synthetic_train_per_class < 1) throw ConfigError("data.synthetic_train_per_class must be >= 1");
    if (data.synthetic_test_per_class < 1) throw ConfigError("data.synthetic_test_per_class must be >= 1");
    if (data.synthetic_seed < 0) throw ConfigError("data.synthetic_seed must be >= 0");
    if (plan.base_classes < 0) throw ConfigError("plan.base_classes must be >= 0");
    if (plan.base_classes == 0 && !(plan.base_fraction > 0.0 && plan.base_fraction <= 1.0)) {
        throw ConfigError("plan.base_fraction must lie in (0, 1]");
    }
    if (plan.increment < 1) throw ConfigError("plan.increment must be >= 1");
    if (plan.seed < -1) throw ConfigError("plan.seed must be >= 0, or -1 to follow experiment.seed");
    try {
        backbone.validate();
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("backbone: ") + e.what());
    }
    train.validate();
    if (memory.size < 1) throw ConfigError("memory.size must be >= 1");
    if (plots.cam_per_class < 0) throw ConfigError("plots.cam_per_class must be >= 0");
}

ExperimentConfig parse_config(const std::string& text, const ExperimentConfig& base, const std::string& source) {
    ExperimentConfig config = base;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string where = source + ":" + std::to_string(line_no) + ": ";
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        if (t[0] == '[') {
            const auto close = t.find(']');
            if (close == std::string::npos) throw ConfigError(where + "unterminated section header");
            const std::string rest = trim(std::string_view(t).substr(close + 1));
            if (!rest.empty() && rest[0] != '#') throw ConfigError(where + "unexpected text after section header");
            section = trim(std::string_view(t).substr(1, close - 1));
            if (!section_exists(section)) throw ConfigError(where + "unknown section [" + section + "]");
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        std::string key = trim(std::string_view(t).substr(0, eq));
        if (!valid_identifier(key)) throw ConfigError(where + "invalid key '" + key + "'");
        if (section.empty()) throw ConfigError(where + "key '" + key + "' appears before any [section]");
        Value value;
        try {
            value = ValueParser(std::string_view(t).substr(eq + 1)).parse_all();
        } catch (const ConfigError& e) {
            throw ConfigError(where + section + "." + key + ": " + e.what());
        }
        assign(config, section, key, value, where);
    }
    return config;
}

ExperimentConfig load_config_file(const std::filesystem::path& file, const ExperimentConfig& base) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config file " + file.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str(), base, file.string());
}

void apply_override(ExperimentConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + assignment + "'");
    const std::string path = trim(std::string_view(assignment).substr(0, eq));
    const std::string raw = trim(std::string_view(assignment).substr(eq + 1));
    const auto dot = path.find('.');
    if (dot == std::string::npos) throw ConfigError("--set key must be section.key, got '" + path + "'");
    const std::string section = path.substr(0, dot);
    const std::string key = path.substr(dot + 1);
    Value value;
    try {
        value = ValueParser(raw).parse_all();
    } catch (const ConfigError&) {
        // Bare words are accepted as strings on the command line.
        value.kind = Value::Kind::String;
        value.text = raw;
    }
    if (value.kind != Value::Kind::String && find_field(section, key) != nullptr) {
        // A string-typed key given an unquoted word that happens to parse as
        // something else (e.g. a numeric name) is still a string.
        ExperimentConfig probe = config;
        try {
            find_field(section, key)->set(probe, value);
        } catch (const ConfigError&) {
            Value as_text;
            as_text.text = raw;
            try {
                find_field(section, key)->set(probe, as_text);
                value = as_text;
            } catch (const ConfigError&) {
            }
        }
    }
    assign(config, section, key, value, "--set: ");
}

std::string dump_config(const ExperimentConfig& config) {
    std::ostringstream out;
    std::string section;
    for (const auto& f : schema()) {
        if (f.section != section) {
            if (!section.empty()) out << "\n";
            section = f.section;
            out << "[" << section << "]\n";
        }
        out << f.key << " = " << f.show(config) << "\n";
    }
    return out.str();
}

std::string config_hash(const ExperimentConfig& config) {
    // Where results are written and how chatty the run is do not change them.
    ExperimentConfig key = config;
    key.experiment.name.clear();
    key.experiment.output_dir.clear();
    key.experiment.verbose = false;
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << fnv1a(dump_config(key));
    return out.str();
}

std::vector<std::string> preset_names() {
    std::vector<std::string> names;
    for (const auto& [name, _] : presets()) names.push_back(name);
    return names;
}

const std::string& preset_text(const std::string& name) {
    const auto it = presets().find(name);
    if (it == presets().end()) {
        std::string known;
        for (const auto& n : preset_names()) known += (known.empty() ? "" : ", ") + n;
        throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
    }
    return it->second;
}

ExperimentConfig preset_config(const std::string& name) {
    return parse_config(preset_text(name), ExperimentConfig{}, "preset " + name);
}

std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : schema()) keys.push_back(f.section + "." + f.key);
    return keys;
}

}  // namespace cilforge
