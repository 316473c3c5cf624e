#pragma once

// Experiment orchestration: config files, exact or Monte Carlo induced
// distributions, TV/KL against the target, block and layer sweeps, CSV.
//
// Config format: one `key = value` per line, `#` starts a comment.
//
//   joint = path/to/model.joint      # or: generator = fig2 | tree | chain | cross_block | ...
//   generator_seed = 0
//   vocab = 2                        # generator vocabulary (families that take one)
//   length = 6                       # generator length (families that take one)
//   prompt = 1                       # comma-separated prompt tokens
//   unconditional = false            # allow an empty prompt
//   denoiser = oracle                # or: checkpoint
//   checkpoint = path/to/model.ckpt
//   samples = 2000                   # Monte Carlo draws per policy
//   metrics = tv,kl,nfe
//   mode = auto                      # auto | exact | mc
//   enumeration_limit = 1000000
//   output = results.csv
//   seed = 0
//   temperature = sample             # any policy key here is a default for every policy
//   policy = conf scorer=confidence selector=topk steps=2
//   policy = dos_eb scorer=dos selector=eb gamma=0.01 layer=0
//   policy = d schedule=1,2|3,4      # fixed group schedule
//
// Policy keys: scorer, selector, steps, k, eps, tau, eps_kl, history (alias n),
// gamma, eb_mode, dep_threshold, block_size (alias block), temperature,
// layer, remask, schedule.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dos/checkpoint.hpp"
#include "dos/decoding.hpp"
#include "dos/distribution.hpp"
#include "dos/generators.hpp"
#include "dos/joint_file.hpp"

namespace dos {

class ConfigError : public std::runtime_error {
public:
    ConfigError(std::size_t line, const std::string& what)
        : std::runtime_error(line ? "config line " + std::to_string(line) + ": " + what : what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

struct ConfigEntry {
    std::size_t line = 0;
    std::string key;
    std::string value;
};

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) out.push_back(trim(cur));
    if (!s.empty() && s.back() == sep) out.emplace_back();
    return out;
}

inline double to_double(const std::string& v, std::size_t line, const std::string& key) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used == v.size()) return d;
    } catch (const std::exception&) {
    }
    throw ConfigError(line, "'" + key + "' expects a number, got '" + v + "'");
}

inline std::uint64_t to_uint(const std::string& v, std::size_t line, const std::string& key) {
    try {
        std::size_t used = 0;
        if (!v.empty() && v[0] != '-') {
            const auto u = std::stoull(v, &used);
            if (used == v.size()) return u;
        }
    } catch (const std::exception&) {
    }
    throw ConfigError(line, "'" + key + "' expects a nonnegative integer, got '" + v + "'");
}

inline bool to_bool(const std::string& v, std::size_t line, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError(line, "'" + key + "' expects true or false, got '" + v + "'");
}

inline Tokens to_tokens(const std::string& v, std::size_t line, const std::string& key) {
    Tokens out;
    if (trim(v).empty()) return out;
    for (const auto& part : split(v, ',')) out.push_back(static_cast<Token>(to_uint(part, line, key)));
    return out;
}

}  // namespace detail

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
inline std::vector<ConfigEntry> read_key_values(std::istream& in) {
    std::vector<ConfigEntry> out;
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        if (const auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
        raw = detail::trim(raw);
        if (raw.empty()) continue;
        const auto eq = raw.find('=');
        if (eq == std::string::npos) throw ConfigError(line, "expected 'key = value', got '" + raw + "'");
        ConfigEntry e{line, detail::trim(raw.substr(0, eq)), detail::trim(raw.substr(eq + 1))};
        if (e.key.empty()) throw ConfigError(line, "missing key");
        out.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

inline ScorerKind parse_scorer(const std::string& s) {
    if (s == "confidence") return ScorerKind::confidence;
    if (s == "entropy") return ScorerKind::entropy;
    if (s == "margin") return ScorerKind::margin;
    if (s == "dos") return ScorerKind::dos;
    if (s == "oracle_dep") return ScorerKind::oracle_dep;
    throw std::invalid_argument("unknown scorer '" + s + "'");
}

inline SelectorKind parse_selector(const std::string& s) {
    if (s == "topk") return SelectorKind::topk;
    if (s == "threshold") return SelectorKind::threshold;
    if (s == "klass") return SelectorKind::klass;
    if (s == "eb") return SelectorKind::eb;
    throw std::invalid_argument("unknown selector '" + s + "'");
}

/// A policy with its id. When `schedule` is set the positions are committed
/// in that fixed group order and the scorer/selector fields are ignored.
struct NamedPolicy {
    std::string id;
    PolicyConfig policy;
    std::optional<GroupSchedule> schedule;
};

inline GroupSchedule parse_schedule(const std::string& v, std::size_t line) {
    std::vector<std::vector<std::size_t>> groups;
    for (const auto& g : detail::split(v, '|')) {
        std::vector<std::size_t> group;
        for (Token t : detail::to_tokens(g, line, "schedule")) group.push_back(static_cast<std::size_t>(t));
        groups.push_back(std::move(group));
    }
    return GroupSchedule(std::move(groups));
}

/// Applies one policy key. Returns false when `key` is not a policy key.
inline bool apply_policy_key(NamedPolicy& p, const std::string& key, const std::string& value, std::size_t line) {
    using namespace detail;
    auto& c = p.policy;
    try {
        if (key == "scorer") c.scorer = parse_scorer(value);
        else if (key == "selector") c.selector = parse_selector(value);
        else if (key == "steps") c.steps = to_uint(value, line, key);
        else if (key == "k") c.k = to_uint(value, line, key);
        else if (key == "eps") c.eps = to_double(value, line, key);
        else if (key == "tau") c.tau = to_double(value, line, key);
        else if (key == "eps_kl") c.eps_kl = to_double(value, line, key);
        else if (key == "history" || key == "n") c.history = to_uint(value, line, key);
        else if (key == "gamma") c.gamma = to_double(value, line, key);
        else if (key == "dep_threshold") c.dep_threshold = to_double(value, line, key);
        else if (key == "block_size" || key == "block") c.block_size = to_uint(value, line, key);
        else if (key == "layer") c.layer = to_uint(value, line, key);
        else if (key == "remask") c.remask = to_bool(value, line, key);
        else if (key == "schedule") p.schedule = parse_schedule(value, line);
        else if (key == "eb_mode") {
            if (value == "rank") c.eb_mode = EbMode::rank;
            else if (value == "dependency_filter") c.eb_mode = EbMode::dependency_filter;
            else throw std::invalid_argument("unknown eb_mode '" + value + "'");
        } else if (key == "temperature") {
            if (value == "greedy") c.temperature = Temperature::greedy;
            else if (value == "sample") c.temperature = Temperature::sample;
            else throw std::invalid_argument("unknown temperature '" + value + "'");
        } else {
            return false;
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const std::invalid_argument& e) {
        throw ConfigError(line, e.what());
    }
    return true;
}

/// Parses "<id> key=value key=value ..." on top of `base`.
inline NamedPolicy parse_policy_spec(const std::string& spec, const NamedPolicy& base = {}, std::size_t line = 0,
                                     bool with_id = true) {
    NamedPolicy p = base;
    std::istringstream in(spec);
    std::string word;
    if (with_id) {
        if (!(in >> p.id) || p.id.find('=') != std::string::npos) throw ConfigError(line, "policy needs an id first");
        if (p.id.find(',') != std::string::npos) throw ConfigError(line, "policy id may not contain ','");
    }
    while (in >> word) {
        const auto eq = word.find('=');
        if (eq == std::string::npos) throw ConfigError(line, "policy field '" + word + "' is not key=value");
        const auto key = word.substr(0, eq);
        if (!apply_policy_key(p, key, word.substr(eq + 1), line)) throw ConfigError(line, "unknown policy key '" + key + "'");
    }
    try {
        p.policy.validate();
    } catch (const std::invalid_argument& e) {
        throw ConfigError(line, "policy '" + p.id + "': " + e.what());
    }
    return p;
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Where the target joint comes from: a joint file or a named generator.
namespace detail {

// Paths written inside a config file are relative to that file.
inline void rebase(std::string& p, const std::filesystem::path& dir) {
    if (!p.empty() && std::filesystem::path(p).is_relative()) p = (dir / p).lexically_normal().string();
}

}  // namespace detail

struct JointSource {
    std::string path;
    std::string generator = "fig2";
    std::uint64_t generator_seed = 0;
    int vocab = 2;
    std::size_t length = 6;

    bool apply(const ConfigEntry& e) {
        if (e.key == "joint") path = e.value;
        else if (e.key == "generator") generator = e.value;
        else if (e.key == "generator_seed") generator_seed = detail::to_uint(e.value, e.line, e.key);
        else if (e.key == "vocab") vocab = static_cast<int>(detail::to_uint(e.value, e.line, e.key));
        else if (e.key == "length") length = detail::to_uint(e.value, e.line, e.key);
        else return false;
        return true;
    }

    JointModel load() const {
        if (!path.empty()) {
            if (!std::filesystem::exists(path)) throw ConfigError(0, "joint file does not exist: " + path);
            return load_joint(path);
        }
        return gen::by_name(generator, generator_seed, vocab, length);
    }
};

enum class EvalMode { automatic, exact, monte_carlo };

struct ExperimentConfig {
    JointSource joint;
    Tokens prompt{1};
    bool unconditional = false;
    bool use_checkpoint = false;
    std::string checkpoint;
    std::vector<NamedPolicy> policies;
    std::size_t samples = 2000;
    std::set<std::string> metrics{"tv", "kl", "nfe"};
    EvalMode mode = EvalMode::automatic;
    std::size_t enumeration_limit = kDefaultEnumerationLimit;
    std::string output;
    std::uint64_t seed = 0;

    void validate() const {
        if (samples < 1) throw ConfigError(0, "samples must be >= 1");
        if (policies.empty()) throw ConfigError(0, "no policies configured");
        if (prompt.empty() && !unconditional) throw ConfigError(0, "empty prompt requires unconditional = true");
        if (use_checkpoint && checkpoint.empty()) throw ConfigError(0, "denoiser = checkpoint needs a checkpoint path");
        std::set<std::string> ids;
        for (const auto& p : policies) {
            if (!ids.insert(p.id).second) throw ConfigError(0, "duplicate policy id '" + p.id + "'");
        }
        for (const auto& m : metrics) {
            if (m != "tv" && m != "kl" && m != "nfe") throw ConfigError(0, "unknown metric '" + m + "'");
        }
    }
};

inline ExperimentConfig parse_experiment(std::istream& in) {
    ExperimentConfig c;
    NamedPolicy defaults;
    std::vector<ConfigEntry> policy_lines;
    for (const auto& e : read_key_values(in)) {
        using namespace detail;
        if (c.joint.apply(e)) continue;
        if (e.key == "policy") policy_lines.push_back(e);
        else if (e.key == "prompt") c.prompt = to_tokens(e.value, e.line, e.key);
        else if (e.key == "unconditional") c.unconditional = to_bool(e.value, e.line, e.key);
        else if (e.key == "denoiser") {
            if (e.value == "oracle") c.use_checkpoint = false;
            else if (e.value == "checkpoint") c.use_checkpoint = true;
            else throw ConfigError(e.line, "denoiser must be oracle or checkpoint");
        } else if (e.key == "checkpoint") c.checkpoint = e.value;
        else if (e.key == "samples") c.samples = to_uint(e.value, e.line, e.key);
        else if (e.key == "metrics") {
            c.metrics.clear();
            for (const auto& m : split(e.value, ',')) c.metrics.insert(m);
        } else if (e.key == "mode") {
            if (e.value == "auto") c.mode = EvalMode::automatic;
            else if (e.value == "exact") c.mode = EvalMode::exact;
            else if (e.value == "mc") c.mode = EvalMode::monte_carlo;
            else throw ConfigError(e.line, "mode must be auto, exact or mc");
        } else if (e.key == "enumeration_limit") c.enumeration_limit = to_uint(e.value, e.line, e.key);
        else if (e.key == "output") c.output = e.value;
        else if (e.key == "seed") c.seed = to_uint(e.value, e.line, e.key);
        else if (!apply_policy_key(defaults, e.key, e.value, e.line)) throw ConfigError(e.line, "unknown key '" + e.key + "'");
    }
    if (defaults.schedule) throw ConfigError(0, "schedule must be given per policy");
    for (const auto& e : policy_lines) c.policies.push_back(parse_policy_spec(e.value, defaults, e.line));
    c.validate();
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(0, "cannot open config " + path);
    auto c = parse_experiment(in);
    const auto dir = std::filesystem::path(path).parent_path();
    detail::rebase(c.joint.path, dir);
    detail::rebase(c.checkpoint, dir);
    detail::rebase(c.output, dir);
    return c;
}

/// Training job: joint source, prompt length, model config, checkpoint path.
struct TrainJob {
    JointSource joint;
    std::size_t prompt_len = 1;
    nn::TransformerConfig model;
    std::string output;
    std::string loss_log;
};

inline TrainJob parse_train_config(std::istream& in) {
    TrainJob j;
    for (const auto& e : read_key_values(in)) {
        using namespace detail;
        auto as_int = [&] { return static_cast<int>(to_uint(e.value, e.line, e.key)); };
        if (j.joint.apply(e)) continue;
        if (e.key == "prompt_len") j.prompt_len = to_uint(e.value, e.line, e.key);
        else if (e.key == "n_layers") j.model.n_layers = as_int();
        else if (e.key == "n_heads") j.model.n_heads = as_int();
        else if (e.key == "d_model") j.model.d_model = as_int();
        else if (e.key == "max_len") j.model.max_len = as_int();
        else if (e.key == "batch_size") j.model.batch_size = as_int();
        else if (e.key == "train_steps") j.model.train_steps = as_int();
        else if (e.key == "seed") j.model.seed = to_uint(e.value, e.line, e.key);
        else if (e.key == "learning_rate") j.model.learning_rate = to_double(e.value, e.line, e.key);
        else if (e.key == "t_min") j.model.t_min = to_double(e.value, e.line, e.key);
        else if (e.key == "output") j.output = e.value;
        else if (e.key == "loss_log") j.loss_log = e.value;
        else throw ConfigError(e.line, "unknown key '" + e.key + "'");
    }
    return j;
}

inline TrainJob load_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(0, "cannot open config " + path);
    auto j = parse_train_config(in);
    const auto dir = std::filesystem::path(path).parent_path();
    detail::rebase(j.joint.path, dir);
    detail::rebase(j.output, dir);
    detail::rebase(j.loss_log, dir);
    return j;
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

struct MetricRow {
    std::string policy_id;
    std::string scorer;
    std::string selector;
    std::size_t block_size = 0;
    int layer = -1;
    double tv = 0.0;
    double kl = 0.0;
    double mean_nfe = 0.0;
    std::size_t samples = 0;  // 0 for exact enumeration
    std::uint64_t seed = 0;

    bool operator==(const MetricRow&) const = default;
};

struct PolicyFailure {
    std::string policy_id;
    std::string message;
};

/// Weighted traces behind one row: path probabilities in exact mode,
/// 1/samples in Monte Carlo mode.
using WeightedTraces = std::vector<std::pair<double, DecodeTrace>>;

struct ExperimentResult {
    std::vector<MetricRow> rows;
    std::vector<PolicyFailure> failures;
    std::vector<WeightedTraces> traces;  // parallel to rows when requested
};

/// The materialized inputs shared by every policy of one experiment.
struct Experiment {
    ExperimentConfig config;
    JointModel model;
    std::unique_ptr<Denoiser> denoiser;
    SequenceState start;
    SequenceDistribution target;

    bool oracle() const { return !config.use_checkpoint; }
};

inline Experiment prepare_experiment(const ExperimentConfig& config) {
    config.validate();
    JointModel model = config.joint.load();
    if (config.prompt.size() >= model.length()) throw ConfigError(0, "prompt leaves no positions to generate");
    SequenceState start =
        make_masked_state(Vocabulary(model.vocab_size()), config.prompt, model.length() - config.prompt.size(),
                          config.unconditional);
    std::unique_ptr<Denoiser> den;
    if (config.use_checkpoint) {
        if (!std::filesystem::exists(config.checkpoint)) throw ConfigError(0, "checkpoint does not exist: " + config.checkpoint);
        den = std::make_unique<TransformerDenoiser>(nn::load_checkpoint(config.checkpoint));
    } else {
        den = std::make_unique<OracleDenoiser>(model, config.enumeration_limit);
    }
    detail::check_denoiser(*den, start);
    auto target = conditional_joint(model, start, config.enumeration_limit);
    return Experiment{config, std::move(model), std::move(den), std::move(start), std::move(target)};
}

/// Stream for the policy at `index`, derived from the global seed.
inline Rng policy_rng(std::uint64_t seed, std::size_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index)};
    return Rng(seq);
}

/// Samples a fixed group schedule through a denoiser: each group is drawn
/// from independent per-position predictions, one forward call per group.
inline DecodeResult decode_schedule(const Denoiser& denoiser, const GroupSchedule& schedule, const SequenceState& start,
                                    Temperature temperature, Rng& rng) {
    detail::check_denoiser(denoiser, start);
    schedule.validate(start);
    SequenceState state = start;
    DecodeTrace trace;
    for (const auto& group : schedule.groups()) {
        const auto out = denoiser.forward(state);
        TraceStep step;
        for (std::size_t p : group) {
            const Token t = commit_token(out.probs[p], temperature, rng);
            state.set_token(p, t);
            step.positions.push_back(p);
            step.tokens.push_back(t);
            step.scores.push_back(out.probs[p].prob(t));
        }
        step.nfe = trace.steps.size() + 1;
        trace.steps.push_back(std::move(step));
    }
    return DecodeResult{std::move(state), std::move(trace)};
}

/// Forward calls implied by a set of traces, counted from their step lists.
inline double recount_nfe(const WeightedTraces& traces) {
    double total = 0.0, mass = 0.0;
    for (const auto& [w, t] : traces) {
        total += w * static_cast<double>(t.steps.size());
        mass += w;
    }
    return mass > 0.0 ? total / mass : 0.0;
}

namespace detail {

inline double nan() { return std::numeric_limits<double>::quiet_NaN(); }

inline MetricRow evaluate_policy(const Experiment& ex, const NamedPolicy& p, std::size_t index, WeightedTraces* traces) {
    const auto& cfg = ex.config;
    const bool schedule = p.schedule.has_value();
    if (schedule) p.schedule->validate(ex.start);
    MetricRow row;
    row.policy_id = p.id;
    row.scorer = schedule ? "schedule" : to_string(p.policy.scorer);
    row.selector = schedule ? "fixed" : to_string(p.policy.selector);
    row.block_size = (schedule || p.policy.block_size == 0) ? ex.start.gen_len() : p.policy.block_size;
    row.layer = (!schedule && p.policy.scorer == ScorerKind::dos) ? static_cast<int>(p.policy.layer) : -1;
    row.seed = cfg.seed;

    SequenceDistribution induced;
    bool exact = cfg.mode == EvalMode::exact || (cfg.mode == EvalMode::automatic && ex.oracle() && !p.policy.remask);
    if (exact) {
        try {
            if (schedule) {
                if (!ex.oracle()) throw std::invalid_argument("exact schedules need the oracle denoiser");
                // every outcome path takes one step per group; the greedy path stands in for all of them
                Rng unused(0);
                auto greedy = decode_schedule(*ex.denoiser, *p.schedule, ex.start, Temperature::greedy, unused);
                if (p.policy.temperature == Temperature::sample) {
                    induced = exact_policy_distribution(ex.model, ex.start, *p.schedule, cfg.enumeration_limit);
                } else {
                    induced[greedy.final_state.tokens()] = 1.0;
                }
                row.mean_nfe = static_cast<double>(greedy.trace.nfe());
                if (traces) traces->emplace_back(1.0, std::move(greedy.trace));
            } else {
                auto r = enumerate_policy(*ex.denoiser, p.policy, ex.start, traces != nullptr, cfg.enumeration_limit);
                induced = std::move(r.distribution);
                row.mean_nfe = r.expected_nfe;
                if (traces) *traces = std::move(r.traces);
            }
            row.samples = 0;
        } catch (const EnumerationLimitError&) {
            if (cfg.mode == EvalMode::exact) throw;
            exact = false;
            if (traces) traces->clear();
        }
    }
    if (!exact) {
        Rng rng = policy_rng(cfg.seed, index);
        std::vector<Tokens> samples;
        samples.reserve(cfg.samples);
        double nfe = 0.0;
        const double w = 1.0 / static_cast<double>(cfg.samples);
        for (std::size_t s = 0; s < cfg.samples; ++s) {
            auto r = schedule ? decode_schedule(*ex.denoiser, *p.schedule, ex.start, p.policy.temperature, rng)
                              : run_policy(*ex.denoiser, p.policy, ex.start, rng);
            nfe += static_cast<double>(r.trace.nfe());
            samples.push_back(r.final_state.tokens());
            if (traces) traces->emplace_back(w, std::move(r.trace));
        }
        induced = empirical_distribution(samples);
        row.mean_nfe = nfe / static_cast<double>(cfg.samples);
        row.samples = cfg.samples;
    }
    row.tv = cfg.metrics.count("tv") ? tv_distance(ex.target, induced) : nan();
    row.kl = cfg.metrics.count("kl") ? kl_sequences(ex.target, induced) : nan();
    if (!cfg.metrics.count("nfe")) row.mean_nfe = nan();
    return row;
}

}  // namespace detail

/// Evaluates `policies` against a prepared experiment. A policy that throws
/// is recorded in `failures` and the remaining policies still run.
inline ExperimentResult run_policies(const Experiment& ex, const std::vector<NamedPolicy>& policies,
                                     bool keep_traces = false) {
    ExperimentResult out;
    for (std::size_t i = 0; i < policies.size(); ++i) {
        WeightedTraces traces;
        try {
            out.rows.push_back(detail::evaluate_policy(ex, policies[i], i, keep_traces ? &traces : nullptr));
            if (keep_traces) out.traces.push_back(std::move(traces));
        } catch (const std::exception& e) {
            out.failures.push_back(PolicyFailure{policies[i].id, e.what()});
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kCsvSchema = "# schema: dos-metrics v1";
inline constexpr const char* kCsvHeader = "policy_id,scorer,selector,block_size,layer,tv,kl,mean_nfe,samples,seed";

namespace detail {
inline std::string fmt(double v) {
    if (std::isnan(v)) return {};
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v == 0.0 ? 0.0 : v);
    return buf;
}
}  // namespace detail

inline void write_csv(const std::vector<MetricRow>& rows, std::ostream& out) {
    out << kCsvSchema << '\n' << kCsvHeader << '\n';
    for (const auto& r : rows) {
        out << r.policy_id << ',' << r.scorer << ',' << r.selector << ',' << r.block_size << ',' << r.layer << ','
            << detail::fmt(r.tv) << ',' << detail::fmt(r.kl) << ',' << detail::fmt(r.mean_nfe) << ',' << r.samples
            << ',' << r.seed << '\n';
    }
}

inline void save_csv(const std::vector<MetricRow>& rows, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    write_csv(rows, out);
    if (!out) throw std::runtime_error("failed writing " + path);
}

/// Runs every configured policy; writes the CSV when `output` is set.
inline ExperimentResult run_experiment(const ExperimentConfig& config, bool keep_traces = false) {
    const Experiment ex = prepare_experiment(config);
    auto r = run_policies(ex, config.policies, keep_traces);
    if (!config.output.empty()) save_csv(r.rows, config.output);
    return r;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Every configured policy at every block size (0 means the whole
/// generation span). Ids get a "/b<size>" suffix.
inline ExperimentResult sweep_blocks(const ExperimentConfig& config, const std::vector<std::size_t>& sizes,
                                     bool keep_traces = false) {
    const Experiment ex = prepare_experiment(config);
    std::vector<NamedPolicy> expanded;
    for (const auto& p : config.policies) {
        for (std::size_t b : sizes) {
            const std::size_t size = b == 0 ? ex.start.gen_len() : b;
            if (size > ex.start.gen_len()) throw ConfigError(0, "block size " + std::to_string(size) + " exceeds gen_len");
            NamedPolicy q = p;
            q.policy.block_size = size;
            q.id = p.id + "/b" + std::to_string(size);
            expanded.push_back(std::move(q));
        }
    }
    auto r = run_policies(ex, expanded, keep_traces);
    if (!config.output.empty()) save_csv(r.rows, config.output);
    return r;
}

/// The attention-dependency policies of the config (or a default top-K one)
/// at each layer in [first, last]. Needs a transformer denoiser.
inline ExperimentResult sweep_layers(const ExperimentConfig& config, std::size_t first, std::size_t last,
                                     bool keep_traces = false) {
    if (!config.use_checkpoint) throw ConfigError(0, "layer sweeps need denoiser = checkpoint");
    const Experiment ex = prepare_experiment(config);
    const std::size_t layers = ex.denoiser->num_layers();
    if (first > last) throw std::invalid_argument("empty layer range");
    if (last >= layers) {
        throw std::out_of_range("layer " + std::to_string(last) + " out of range (model has " + std::to_string(layers) +
                                " layers)");
    }
    std::vector<NamedPolicy> base;
    for (const auto& p : config.policies) {
        if (!p.schedule && p.policy.scorer == ScorerKind::dos) base.push_back(p);
    }
    if (base.empty()) {
        NamedPolicy p;
        p.id = "dos";
        p.policy.scorer = ScorerKind::dos;
        p.policy.temperature = Temperature::sample;
        base.push_back(p);
    }
    std::vector<NamedPolicy> expanded;
    for (const auto& p : base) {
        for (std::size_t l = first; l <= last; ++l) {
            NamedPolicy q = p;
            q.policy.layer = l;
            q.id = p.id + "/l" + std::to_string(l);
            expanded.push_back(std::move(q));
        }
    }
    auto r = run_policies(ex, expanded, keep_traces);
    if (!config.output.empty()) save_csv(r.rows, config.output);
    return r;
}

/// Mean over `states` random masked states of the mean per-position
/// KL(oracle || model) at the masked positions. States are clean joint draws
/// corrupted at t ~ U(0, 1]; draws with nothing masked are redrawn.
inline double mean_conditional_kl(const nn::Params& params, const JointModel& model, std::size_t prompt_len,
                                  std::size_t states, Rng& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Vocabulary vocab(model.vocab_size());
    double total = 0.0;
    for (std::size_t n = 0; n < states;) {
        const SequenceState x0(vocab, sample_joint(model, rng), prompt_len);
        const auto xt = forward_mask(x0, 1.0 - u(rng), rng);
        if (xt.count_masked() == 0) continue;
        const auto oracle = conditional_marginal(model, xt);
        const auto pred = nn::forward(params, xt).probs;
        double s = 0.0;
        for (std::size_t i : xt.masked_positions()) s += kl_divergence(oracle[i], pred[i]);
        total += s / static_cast<double>(xt.count_masked());
        ++n;
    }
    return total / static_cast<double>(states);
}

// ---------------------------------------------------------------------------
// Four-token verification suite
// ---------------------------------------------------------------------------

struct Fig2Case {
    std::uint64_t seed = 0;
    double tv[4] = {0, 0, 0, 0};  // schedules a, b, c, d
    bool pass = false;
};

/// For each seed: exact TV of schedules (a)-(d) on the seeded tables with
/// prompt C = 1. Passes when (d) is exact (<= 1e-9) and the rest exceed 0.01.
inline std::vector<Fig2Case> run_fig2_suite(const std::vector<std::uint64_t>& seeds) {
    std::vector<Fig2Case> out;
    for (auto seed : seeds) {
        Fig2Case c;
        c.seed = seed;
        const auto m = gen::fig2::seeded(seed);
        for (int i = 0; i < 4; ++i) c.tv[i] = gen::fig2::schedule_tv(m, static_cast<char>('a' + i));
        c.pass = c.tv[3] <= 1e-9 && c.tv[0] > 0.01 && c.tv[1] > 0.01 && c.tv[2] > 0.01;
        out.push_back(c);
    }
    return out;
}

}  // namespace dos
