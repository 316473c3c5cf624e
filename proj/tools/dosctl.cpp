// dosctl: train | decode | evaluate | sweep | fig2

#include <chrono>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "dos/dos.hpp"

using namespace dos;

namespace {

std::string join(const Tokens& t) {
    std::string s;
    for (std::size_t i = 0; i < t.size(); ++i) s += (i ? "," : "") + std::to_string(t[i]);
    return s;
}

void report_failures(const ExperimentResult& r) {
    for (const auto& f : r.failures) std::cerr << "policy " << f.policy_id << " failed: " << f.message << '\n';
}

int emit(const ExperimentResult& r, const std::string& output) {
    report_failures(r);
    if (output.empty()) write_csv(r.rows, std::cout);
    else std::cerr << "wrote " << r.rows.size() << " rows to " << output << '\n';
    return r.failures.empty() ? 0 : 2;
}

// "0-9" or "0,3,5"
std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
    std::vector<std::uint64_t> out;
    if (const auto dash = s.find('-'); dash != std::string::npos) {
        const auto a = std::stoull(s.substr(0, dash)), b = std::stoull(s.substr(dash + 1));
        for (auto i = a; i <= b; ++i) out.push_back(i);
        return out;
    }
    for (const auto& part : detail::split(s, ',')) out.push_back(std::stoull(part));
    return out;
}

int cmd_train(const std::string& config_path, std::string output, std::string loss_log, int log_every) {
    auto job = load_train_config(config_path);
    if (!output.empty()) job.output = output;
    if (!loss_log.empty()) job.loss_log = loss_log;
    if (job.output.empty()) throw ConfigError(0, "no checkpoint output path (config 'output' or -o)");
    const JointModel model = job.joint.load();
    job.model.vocab_size = model.vocab_size();

    const auto t0 = std::chrono::steady_clock::now();
    double window = 0.0;
    auto result = nn::train(job.model, model, job.prompt_len, [&](int step, double loss) {
        window += loss;
        if (log_every > 0 && (step + 1) % log_every == 0) {
            std::cerr << "step " << step + 1 << " loss " << window / log_every << '\n';
            window = 0.0;
        }
    });
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    nn::save_checkpoint(result.params, job.output);
    if (!job.loss_log.empty()) {
        std::ofstream log(job.loss_log);
        log << "step,loss\n";
        for (std::size_t i = 0; i < result.loss_curve.size(); ++i) log << i + 1 << ',' << result.loss_curve[i] << '\n';
    }
    Rng eval_rng(job.model.seed + 1);
    const double kl = mean_conditional_kl(result.params, model, job.prompt_len, 500, eval_rng);
    std::cerr << "mean conditional KL(oracle || model) over 500 masked states: " << kl << '\n';
    std::cerr << "trained " << job.model.train_steps << " steps in " << secs << " s ("
              << result.params.num_parameters() << " parameters, " << result.skipped_examples
              << " unmasked examples skipped); checkpoint " << job.output << '\n';
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"masked diffusion decoding lab"};
    app.require_subcommand(1);

    auto* train = app.add_subcommand("train", "train the toy transformer from a config file");
    std::string train_config, train_out, loss_log;
    int log_every = 100;
    train->add_option("config", train_config, "training config")->required()->check(CLI::ExistingFile);
    train->add_option("-o,--output", train_out, "checkpoint path (overrides config)");
    train->add_option("--loss-log", loss_log, "write the per-step loss curve as CSV");
    train->add_option("--log-every", log_every, "print the mean loss every N steps (0 = quiet)");

    auto* dec = app.add_subcommand("decode", "decode one sequence and print its trace");
    JointSource source;
    std::string checkpoint, prompt = "1", policy_spec, trace_path;
    std::size_t gen_len = 0;
    std::uint64_t seed = 0;
    bool unconditional = false;
    dec->add_option("--joint", source.path, "joint file for the oracle denoiser");
    dec->add_option("--generator", source.generator, "named joint generator")->capture_default_str();
    dec->add_option("--generator-seed", source.generator_seed, "generator seed");
    dec->add_option("--vocab", source.vocab, "generator vocabulary size")->capture_default_str();
    dec->add_option("--length", source.length, "generator length")->capture_default_str();
    dec->add_option("--checkpoint", checkpoint, "use a trained transformer instead of the oracle");
    dec->add_option("--prompt", prompt, "comma-separated prompt tokens")->capture_default_str();
    dec->add_flag("--unconditional", unconditional, "allow an empty prompt");
    dec->add_option("--gen-len", gen_len, "positions to generate (default: fill the joint)");
    dec->add_option("--policy", policy_spec, "policy keys, e.g. \"scorer=dos selector=eb gamma=0.01\"");
    dec->add_option("--seed", seed, "sampling seed");
    dec->add_option("--trace", trace_path, "write the JSONL trace here (default: stdout)");

    auto* eval = app.add_subcommand("evaluate", "run an experiment config and write CSV");
    std::string eval_config, eval_out;
    std::optional<std::uint64_t> eval_seed;
    eval->add_option("config", eval_config, "experiment config")->required()->check(CLI::ExistingFile);
    eval->add_option("-o,--output", eval_out, "CSV path (overrides config; default stdout)");
    eval->add_option("--seed", eval_seed, "global seed override");

    auto* sweep = app.add_subcommand("sweep", "sweep block sizes or attention layers");
    std::string sweep_config, sweep_out, blocks, layers;
    sweep->add_option("config", sweep_config, "experiment config")->required()->check(CLI::ExistingFile);
    auto* blocks_opt = sweep->add_option("--blocks", blocks, "block sizes, e.g. 1,2,4,L");
    auto* layers_opt = sweep->add_option("--layers", layers, "layer range, e.g. 0-1");
    blocks_opt->excludes(layers_opt);
    sweep->add_option("-o,--output", sweep_out, "CSV path (overrides config; default stdout)");

    auto* fig2 = app.add_subcommand("fig2", "four-token schedule verification suite");
    std::string fig2_seeds = "0-9";
    fig2->add_option("--seeds", fig2_seeds, "seed range or list")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) return cmd_train(train_config, train_out, loss_log, log_every);

        if (*dec) {
            std::unique_ptr<Denoiser> den;
            int V = 0;
            std::size_t L = 0;
            if (!checkpoint.empty()) {
                auto params = nn::load_checkpoint(checkpoint);
                V = params.config().vocab_size;
                L = static_cast<std::size_t>(params.config().max_len);
                den = std::make_unique<TransformerDenoiser>(std::move(params));
            } else {
                auto model = source.load();
                V = model.vocab_size();
                L = model.length();
                den = std::make_unique<OracleDenoiser>(std::move(model));
            }
            const Tokens p = detail::to_tokens(prompt, 0, "prompt");
            if (gen_len == 0) {
                if (!checkpoint.empty()) throw ConfigError(0, "--gen-len is required with --checkpoint");
                if (p.size() >= L) throw ConfigError(0, "prompt fills the whole joint");
                gen_len = L - p.size();
            }
            const auto start = make_masked_state(Vocabulary(V), p, gen_len, unconditional);
            const auto policy = parse_policy_spec(policy_spec, {}, 0, false);
            Rng rng(seed);
            const auto r = policy.schedule
                               ? decode_schedule(*den, *policy.schedule, start, policy.policy.temperature, rng)
                               : run_policy(*den, policy.policy, start, rng);
            std::cerr << "sequence " << join(r.final_state.tokens()) << " nfe " << r.trace.nfe() << '\n';
            if (trace_path.empty()) {
                write_trace_jsonl(r.trace, std::cout);
            } else {
                std::ofstream out(trace_path);
                if (!out) throw std::runtime_error("cannot write " + trace_path);
                write_trace_jsonl(r.trace, out);
            }
            std::cout << std::flush;
            return 0;
        }

        if (*eval) {
            auto cfg = load_experiment_config(eval_config);
            if (!eval_out.empty()) cfg.output = eval_out;
            if (eval_seed) cfg.seed = *eval_seed;
            return emit(run_experiment(cfg), cfg.output);
        }

        if (*sweep) {
            auto cfg = load_experiment_config(sweep_config);
            if (!sweep_out.empty()) cfg.output = sweep_out;
            if (!layers.empty()) {
                const auto range = parse_seed_list(layers);
                return emit(sweep_layers(cfg, range.front(), range.back()), cfg.output);
            }
            if (blocks.empty()) throw ConfigError(0, "sweep needs --blocks or --layers");
            std::vector<std::size_t> sizes;
            for (const auto& b : detail::split(blocks, ',')) sizes.push_back(b == "L" ? 0 : std::stoul(b));
            return emit(sweep_blocks(cfg, sizes), cfg.output);
        }

        if (*fig2) {
            const auto t0 = std::chrono::steady_clock::now();
            const auto cases = run_fig2_suite(parse_seed_list(fig2_seeds));
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::size_t passed = 0;
            for (const auto& c : cases) {
                std::printf("seed %llu  tv(a)=%.6f tv(b)=%.6f tv(c)=%.6f tv(d)=%.2e  %s\n",
                            static_cast<unsigned long long>(c.seed), c.tv[0], c.tv[1], c.tv[2], c.tv[3],
                            c.pass ? "PASS" : "FAIL");
                passed += c.pass;
            }
            std::printf("%zu/%zu passed in %.3f s\n", passed, cases.size(), secs);
            return passed == cases.size() ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
