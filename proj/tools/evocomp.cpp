// evocomp: generate, label, train, evaluate and inspect visual-token compressors.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>

#include <CLI11.hpp>

#include "evocomp/evocomp.hpp"

namespace fs = std::filesystem;
using evocomp::io::json;
using namespace evocomp;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { ok = 0, check_failed = 1, usage = 2, data = 3, remote = 4 };

int exit_code(Errc c) {
    switch (c) {
        case Errc::invalid_config: return usage;
        case Errc::scorer_failure:
        case Errc::transport:
        case Errc::malformed_response:
        case Errc::protocol:
        case Errc::remote_error:
        case Errc::timeout: return remote;
        default: return data;
    }
}

// ---------------------------------------------------------------------------
// Run manifests

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

struct RunManifest {
    std::string command;
    std::vector<std::string> argv;
    json config = json::object();
    json seeds = json::object();
    json inputs = json::object();
    json outputs = json::object();
    std::string started_at = utc_now();
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();

    void write(const std::string& path) const {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        json j{{"tool", "evocomp"},
               {"version", kVersion},
               {"command", command},
               {"argv", argv},
               {"config", config},
               {"seeds", seeds},
               {"inputs", inputs},
               {"outputs", outputs},
               {"started_at", started_at},
               {"wall_clock_seconds", secs}};
        io::write_file(path, j.dump(2) + "\n");
    }
};

std::string manifest_for(const std::string& primary) { return primary + ".manifest.json"; }

std::string absolute(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

// ---------------------------------------------------------------------------
// Shared helpers

std::uint64_t dataset_seed(const std::string& data, std::uint64_t fallback) {
    if (!fs::exists(io::manifest_path(data))) return fallback;
    return io::read_manifest(data).value("seed", fallback);
}

std::string default_anchors(const std::string& data) {
    return (fs::path(data).parent_path() / "anchors.evc").string();
}

GroupingConfig parse_restrict(const std::string& spec) {
    if (spec.empty() || spec == "none") return {};
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw Error(Errc::invalid_config, "--restrict expects top_k=K or fraction=f");
    const std::string key = spec.substr(0, eq), value = spec.substr(eq + 1);
    try {
        if (key == "top_k") {
            const long k = std::stol(value);
            if (k <= 0) throw Error(Errc::invalid_config, "top_k must be >= 1");
            return GroupingConfig{TopK{static_cast<std::size_t>(k)}};
        }
        if (key == "fraction") return GroupingConfig{TopFraction{std::stod(value)}};
    } catch (const std::logic_error&) {
        throw Error(Errc::invalid_config, "bad --restrict value '" + value + "'");
    }
    throw Error(Errc::invalid_config, "unknown restriction '" + key + "'");
}

json restrict_json(const GroupingConfig& g) {
    if (const auto* k = std::get_if<TopK>(&g.restriction)) return {{"top_k", k->k}};
    if (const auto* f = std::get_if<TopFraction>(&g.restriction)) return {{"fraction", f->fraction}};
    return "none";
}

json evo_json(const EvoConfig& c) {
    return {{"population_size", c.population_size}, {"parent_count", c.parent_count},
            {"iterations", c.iterations},           {"crossover_prob", c.crossover_prob},
            {"mutation_prob", c.mutation_prob},     {"seed", c.seed},
            {"max_dedup_attempts", c.dedup_cap()},  {"workers", c.workers}};
}

json scores_json(const RetentionScores& s) { return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}}; }

std::map<std::string, LabelRecord> index_labels(const std::vector<LabelRecord>& recs) {
    std::map<std::string, LabelRecord> out;
    for (const auto& r : recs) out[r.sample_id] = r;
    return out;
}

/// Evaluation-time r for one sample: explicit r, ratio, or the reference's retained count.
std::size_t resolve_r(std::optional<std::size_t> r, std::optional<double> ratio, std::size_t n, const Mask* ref) {
    if (r) {
        if (*r > n) throw Error(Errc::out_of_range, "r=" + std::to_string(*r) + " exceeds n=" + std::to_string(n));
        return *r;
    }
    if (ratio) return r_from_ratio(*ratio, n);
    if (ref) return ref->retained();
    throw Error(Errc::invalid_config, "give --r, --ratio or --labels");
}

std::vector<Sample> fit_width(std::vector<Sample> samples, std::size_t d_model) {
    for (auto& s : samples)
        if (s.d() != d_model) s = adapt_sample(s, d_model);
    return samples;
}

// ---------------------------------------------------------------------------
// Scorer construction

struct ScorerOptions {
    std::string kind = "planted";
    std::optional<std::uint64_t> seed;
    std::string cmd;
    std::string endpoint;
    std::size_t timeout_ms = 30'000;
    std::size_t latency_us = 0;
};

std::shared_ptr<Scorer> make_scorer(const ScorerOptions& o, const std::string& data, std::uint64_t fallback_seed) {
    const std::uint64_t seed = o.seed.value_or(dataset_seed(data, fallback_seed));
    std::shared_ptr<Scorer> s;
    if (o.kind == "planted")
        s = std::make_shared<PlantedScorer>(seed);
    else if (o.kind == "pooled")
        s = std::make_shared<PooledScorer>(seed);
    else if (o.kind == "echo")
        s = std::make_shared<EchoScorer>();
    else if (o.kind == "remote") {
        const auto timeout = std::chrono::milliseconds(o.timeout_ms);
        if (!o.cmd.empty())
            s = RemoteScorer::spawn(o.cmd, absolute(data), timeout);
        else if (!o.endpoint.empty())
            s = RemoteScorer::connect(o.endpoint, absolute(data), timeout);
        else
            throw Error(Errc::invalid_config, "--scorer remote needs --cmd or --endpoint");
    } else {
        throw Error(Errc::invalid_config, "unknown scorer '" + o.kind + "'");
    }
    if (o.latency_us) s = std::make_shared<LatencyScorer>(s, std::chrono::microseconds(o.latency_us));
    return s;
}

void add_scorer_options(CLI::App* app, ScorerOptions& o) {
    app->add_option("--scorer", o.kind, "planted | pooled | echo | remote")
        ->check(CLI::IsMember({"planted", "pooled", "echo", "remote"}))
        ->capture_default_str();
    app->add_option("--scorer-seed", o.seed, "Scorer seed (default: dataset seed)");
    app->add_option("--cmd", o.cmd, "Command launching a remote scorer");
    app->add_option("--endpoint", o.endpoint, "host:port of a listening remote scorer");
    app->add_option("--timeout-ms", o.timeout_ms, "Remote scorer deadline per batch")->capture_default_str();
}

void add_evo_options(CLI::App* app, EvoConfig& c) {
    app->add_option("--q", c.population_size, "Population size")->capture_default_str();
    app->add_option("--p", c.parent_count, "Parents kept per generation")->capture_default_str();
    app->add_option("--iters", c.iterations, "Generations")->capture_default_str();
    app->add_option("--crossover", c.crossover_prob, "Crossover probability")->capture_default_str();
    app->add_option("--mutation", c.mutation_prob, "Mutation probability")->capture_default_str();
    app->add_option("--max-dedup", c.max_dedup_attempts, "Rejected duplicates per generation (0: 100*q)")
        ->capture_default_str();
    app->add_option("--eval-workers", c.workers, "Concurrent scorer calls per population")->capture_default_str();
}

// ---------------------------------------------------------------------------
// --show-defaults

json defaults_json() {
    const EvoConfig evo;
    const CompressorConfig cc;
    const synth::GenConfig gc;
    auto entry = [](json value, const char* source) { return json{{"value", std::move(value)}, {"source", source}}; };
    return {
        {"evolution",
         {{"population_size", entry(evo.population_size, "method")},
          {"parent_count", entry(evo.parent_count, "method")},
          {"iterations", entry(evo.iterations, "method")},
          {"crossover_prob", entry(evo.crossover_prob, "method")},
          {"mutation_prob", entry(evo.mutation_prob, "method")},
          {"max_dedup_attempts", entry("100 * population_size", "implementation")}}},
        {"grouping", {{"restrict", entry("none", "implementation")}}},
        {"compressor",
         {{"epochs", entry(cc.epochs, "method")},
          {"lr0", entry(cc.lr0, "method")},
          {"schedule", entry("cosine", "method")},
          {"alpha", entry(cc.alpha, "method")},
          {"loss", entry(std::string(loss_kind_name(cc.loss)), "method")},
          {"ghm_bins", entry(100, "implementation")},
          {"ghm_momentum", entry(0.0, "implementation")},
          {"d_model", entry(cc.d_model, "implementation")},
          {"heads", entry(cc.heads, "implementation")},
          {"mlp_ratio", entry(cc.mlp_ratio, "implementation")},
          {"batch_size", entry(cc.batch_size, "implementation")},
          {"init_std", entry(cc.init_std, "implementation")},
          {"val_fraction", entry(cc.val_fraction, "implementation")},
          {"focal_gamma", entry(cc.focal_gamma, "implementation")},
          {"focal_alpha", entry(cc.focal_alpha, "implementation")}}},
        {"generator",
         {{"samples", entry(gc.samples, "implementation")},
          {"tokens", entry(gc.tokens, "implementation")},
          {"groups", entry(gc.groups, "implementation")},
          {"dim", entry(gc.dim, "implementation")},
          {"text_tokens", entry(gc.text_tokens, "implementation")},
          {"noise", entry(gc.noise, "implementation")}}},
        {"remote", {{"timeout_ms", entry(30000, "implementation")}}},
        {"seed", entry(0, "implementation; EVOCOMP_SEED overrides")}};
}

// ---------------------------------------------------------------------------
// Commands

struct GenArgs {
    synth::GenConfig cfg;
    std::string family = "planted";
    std::string out;
};

int cmd_gen(const GenArgs& a, RunManifest& man) {
    synth::GenConfig cfg = a.cfg;
    cfg.family = synth::parse_family(a.family);
    const auto gen = synth::generate(cfg);
    fs::create_directories(a.out);
    const std::string data = (fs::path(a.out) / "dataset.evc").string();
    const std::string anchors = (fs::path(a.out) / "anchors.evc").string();
    const std::string truth = (fs::path(a.out) / "truth.jsonl").string();
    const json extra{{"family", a.family}, {"seed", cfg.seed}, {"tokens", cfg.tokens}, {"groups", cfg.groups},
                     {"dim", cfg.dim},     {"text_tokens", cfg.text_tokens}};
    io::write_dataset(data, gen.samples, extra);
    io::write_anchors(anchors, gen.anchors, {{"seed", cfg.seed}});
    std::vector<LabelRecord> recs;
    for (std::size_t i = 0; i < gen.planted.size(); ++i)
        recs.push_back({gen.samples[i].id, gen.planted[i], 0.0, partition_digest(gen.truth[i]),
                        "planted:" + std::to_string(cfg.seed), cfg.seed});
    io::write_labels(truth, recs);

    man.config = extra;
    man.config["samples"] = cfg.samples;
    man.config["noise"] = cfg.noise;
    man.config["anchors"] = synth::anchor_count(cfg);
    man.seeds = {{"generator", cfg.seed}};
    man.outputs = {{"dataset", data}, {"anchors", anchors}, {"truth", truth}};
    man.write((fs::path(a.out) / "gen.manifest.json").string());
    std::cout << "wrote " << gen.samples.size() << " samples to " << data << "\n";
    return ok;
}

struct LabelArgs {
    std::string data, anchors, out, restrict_spec;
    ScorerOptions scorer;
    LabelJob job;
    bool progress = false;
};

int cmd_label(LabelArgs& a, RunManifest& man) {
    if (a.anchors.empty()) a.anchors = default_anchors(a.data);
    a.job.grouping = parse_restrict(a.restrict_spec);
    validate(a.job.evo);
    const auto samples = io::read_dataset(a.data);
    const auto anchors = io::read_anchors(a.anchors);
    for (const auto& s : samples) validate_sample(s);
    auto scorer = make_scorer(a.scorer, a.data, a.job.evo.seed);

    std::mutex log_mu;
    ProgressFn progress;
    if (a.progress)
        progress = [&](const std::string& id, const IterationStats& st) {
            std::lock_guard lock(log_mu);
            std::cerr << id << " iter " << st.iteration << " best " << st.best_parent_loss << " evals "
                      << st.evaluations << "\n";
        };
    const auto outcomes = label_dataset(samples, anchors, *scorer, a.job, progress);
    std::vector<LabelRecord> recs;
    std::size_t evaluations = 0;
    for (const auto& o : outcomes) {
        recs.push_back(o.record);
        evaluations += o.evaluations;
    }
    io::write_labels(a.out, recs);
    if (auto* r = dynamic_cast<RemoteScorer*>(scorer.get())) r->shutdown();

    man.config = {{"evolution", evo_json(a.job.evo)},
                  {"restrict", restrict_json(a.job.grouping)},
                  {"oracle", a.job.oracle},
                  {"oracle_cap", a.job.oracle_cap},
                  {"sample_workers", a.job.sample_workers},
                  {"scorer", a.scorer.kind},
                  {"scorer_id", scorer->id()}};
    man.seeds = {{"evolution", a.job.evo.seed},
                 {"scorer", a.scorer.seed.value_or(dataset_seed(a.data, a.job.evo.seed))}};
    man.inputs = {{"dataset", a.data}, {"anchors", a.anchors}};
    man.outputs = {{"labels", a.out}};
    man.write(manifest_for(a.out));
    std::cout << "labelled " << recs.size() << " samples with " << evaluations << " scorer calls -> " << a.out << "\n";
    return ok;
}

struct TrainArgs {
    std::string data, labels, out, history, donor;
    CompressorConfig cfg;
    std::string loss = "ghm+cs";
    std::string ghm_mode = "unit_region";
    std::size_t bins = 100;
    double epsilon = 0.01;
    std::size_t d_model = 0;
    bool quiet = false;
};

int cmd_train(TrainArgs& a, RunManifest& man) {
    CompressorConfig cfg = a.cfg;
    cfg.loss = parse_loss_kind(a.loss);
    if (a.ghm_mode == "exact")
        cfg.ghm.mode = GhmExact{a.epsilon};
    else
        cfg.ghm.mode = GhmUnitRegion{a.bins};
    auto samples = io::read_dataset(a.data);
    if (samples.empty()) throw Error(Errc::empty_input, "dataset is empty");
    cfg.d_model = a.d_model ? a.d_model : samples.front().d();
    validate(cfg);
    samples = fit_width(std::move(samples), cfg.d_model);
    const auto labels = io::read_labels(a.labels);

    std::optional<io::ParamFile> donor;
    if (!a.donor.empty()) donor = io::read_params(a.donor);

    std::ofstream history;
    if (!a.history.empty()) {
        history.open(a.history, std::ios::trunc);
        if (!history) throw Error(Errc::io, "cannot write '" + a.history + "'");
        history << "epoch,step,primary,cs,total,lr,val_total\n" << std::setprecision(17);
    }
    const auto res = train(samples, labels, cfg, donor ? &donor->params : nullptr, [&](const EpochStats& st) {
        if (history) history << st.epoch << ',' << st.step << ',' << st.primary << ',' << st.cs << ',' << st.total << ','
                             << st.lr << ',' << st.val_total << '\n';
        if (!a.quiet)
            std::cerr << "epoch " << st.epoch << " total " << st.total << " val " << st.val_total << " lr " << st.lr
                      << "\n";
    });
    io::write_params(a.out, res.params, cfg);

    man.config = io::to_json(cfg);
    man.seeds = {{"compressor", cfg.seed}};
    man.inputs = {{"dataset", a.data}, {"labels", a.labels}};
    if (!a.donor.empty()) man.inputs["donor"] = a.donor;
    man.outputs = {{"params", a.out}, {"params_checksum", io::params_checksum(res.params)},
                   {"best_epoch", res.best_epoch}, {"train_samples", res.train_samples},
                   {"val_samples", res.val_samples}};
    if (!a.history.empty()) man.outputs["history"] = a.history;
    man.write(manifest_for(a.out));
    std::cout << "best epoch " << res.best_epoch << " of " << cfg.epochs << ", params " << io::params_checksum(res.params)
              << " -> " << a.out << "\n";
    return ok;
}

struct EvalArgs {
    std::string data, params, labels, truth, out;
    std::optional<std::size_t> r;
    std::optional<double> ratio;
    std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a, RunManifest& man) {
    const auto pf = io::read_params(a.params);
    check_params(pf.params, pf.config);
    const auto samples = fit_width(io::read_dataset(a.data), pf.config.d_model);
    std::map<std::string, LabelRecord> labels, truth;
    if (!a.labels.empty()) labels = index_labels(io::read_labels(a.labels));
    if (!a.truth.empty()) truth = index_labels(io::read_labels(a.truth));
    if (a.labels.empty() && a.truth.empty()) throw Error(Errc::invalid_config, "give --labels and/or --truth");

    const CompressorParams untrained = init_params(pf.config);
    Rng rng(keyed_hash("random-baseline", a.seed, 0));
    ScoreAverage trained_avg, random_avg, untrained_avg;
    double planted_trained = 0.0, planted_random = 0.0, planted_untrained = 0.0;
    std::size_t planted_count = 0;
    json per_sample = json::array();

    for (const auto& s : samples) {
        const LabelRecord* lab = nullptr;
        const LabelRecord* tru = nullptr;
        if (!labels.empty()) {
            const auto it = labels.find(s.id);
            if (it == labels.end()) throw Error(Errc::length_mismatch, "no label for sample '" + s.id + "'");
            lab = &it->second;
        }
        if (!truth.empty()) {
            const auto it = truth.find(s.id);
            if (it == truth.end()) throw Error(Errc::length_mismatch, "no ground truth for sample '" + s.id + "'");
            tru = &it->second;
        }
        const Mask* ref = lab ? &lab->mask : &tru->mask;
        if (ref->bits.size() != s.n()) throw Error(Errc::length_mismatch, "mask length for sample '" + s.id + "'");
        const std::size_t r = resolve_r(a.r, a.ratio, s.n(), ref);

        const Mask pred = select_top_r(forward(s, pf.params, pf.config).probs, r);
        const Mask base = select_top_r(forward(s, untrained, pf.config).probs, r);
        const Mask rand = random_top_r(s.n(), r, rng);
        json row{{"sample_id", s.id}, {"r", r}};
        if (lab) {
            const auto t = retention_scores(pred, lab->mask);
            trained_avg.add(t);
            random_avg.add(retention_scores(rand, lab->mask));
            untrained_avg.add(retention_scores(base, lab->mask));
            row["trained"] = scores_json(t);
        }
        if (tru) {
            const double rec = retention_scores(pred, tru->mask).recall;
            planted_trained += rec;
            planted_random += retention_scores(rand, tru->mask).recall;
            planted_untrained += retention_scores(base, tru->mask).recall;
            ++planted_count;
            row["planted_recall"] = rec;
        }
        per_sample.push_back(row);
    }

    json report{{"samples", samples.size()}, {"params_checksum", io::params_checksum(pf.params)}};
    if (a.r) report["r"] = *a.r;
    if (a.ratio) report["ratio"] = *a.ratio;
    if (!labels.empty())
        report["metrics"] = {{"trained", scores_json(trained_avg.mean())},
                             {"random", scores_json(random_avg.mean())},
                             {"untrained", scores_json(untrained_avg.mean())}};
    if (planted_count) {
        const auto c = static_cast<double>(planted_count);
        report["planted_recall"] = {
            {"trained", planted_trained / c}, {"random", planted_random / c}, {"untrained", planted_untrained / c}};
    }
    report["per_sample"] = per_sample;
    io::write_file(a.out, report.dump(2) + "\n");

    std::cout << std::fixed << std::setprecision(4);
    std::cout << "baseline     precision  recall     f1         planted_recall\n";
    for (const char* name : {"trained", "random", "untrained"}) {
        std::cout << std::left << std::setw(13) << name;
        if (report.contains("metrics")) {
            const auto& m = report["metrics"][name];
            std::cout << std::setw(11) << m["precision"].get<double>() << std::setw(11) << m["recall"].get<double>()
                      << std::setw(11) << m["f1"].get<double>();
        } else {
            std::cout << std::setw(33) << "-";
        }
        if (report.contains("planted_recall")) std::cout << report["planted_recall"][name].get<double>();
        std::cout << "\n";
    }

    man.config = {{"r", a.r ? json(*a.r) : json(nullptr)}, {"ratio", a.ratio ? json(*a.ratio) : json(nullptr)}};
    man.seeds = {{"random_baseline", a.seed}, {"untrained", pf.config.seed}};
    man.inputs = {{"dataset", a.data}, {"params", a.params}, {"labels", a.labels}, {"truth", a.truth}};
    man.outputs = {{"report", a.out}};
    man.write(manifest_for(a.out));
    return ok;
}

struct CompressArgs {
    std::string data, params, out;
    std::optional<std::size_t> r;
    std::optional<double> ratio;
};

int cmd_compress(const CompressArgs& a, RunManifest& man) {
    if (!a.r && !a.ratio) throw Error(Errc::invalid_config, "give --r or --ratio");
    const auto pf = io::read_params(a.params);
    check_params(pf.params, pf.config);
    const auto raw = io::read_dataset(a.data);
    const auto fitted = fit_width(raw, pf.config.d_model);
    std::vector<Sample> reduced;
    json kept = json::object();
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const std::size_t r = resolve_r(a.r, a.ratio, raw[i].n(), nullptr);
        const Mask m = select_top_r(forward(fitted[i], pf.params, pf.config).probs, r);
        const auto rv = apply_mask(raw[i], m);
        Sample s = raw[i];
        s.visual = rv.rows.rows ? rv.rows : Matrix(0, raw[i].d());
        kept[s.id] = rv.kept;
        reduced.push_back(std::move(s));
    }
    io::write_dataset(a.out, reduced, {{"source", a.data}, {"kept", kept}});
    man.config = {{"r", a.r ? json(*a.r) : json(nullptr)}, {"ratio", a.ratio ? json(*a.ratio) : json(nullptr)}};
    man.inputs = {{"dataset", a.data}, {"params", a.params}};
    man.outputs = {{"dataset", a.out}};
    man.write(manifest_for(a.out));
    std::cout << "compressed " << reduced.size() << " samples -> " << a.out << "\n";
    return ok;
}

struct RenderArgs {
    std::string bits, data, labels, params, sample, out, format = "text";
    std::size_t width = 0, cell = 8;
    std::optional<std::size_t> r;
    std::optional<double> ratio;
};

/// Kept cells '#', dropped '.', padding ' '; or a binary PPM with the same layout.
std::string render_grid(const Mask& m, std::size_t width, const std::string& format, std::size_t cell) {
    if (width == 0) throw Error(Errc::invalid_config, "grid width must be >= 1");
    const std::size_t n = m.bits.size(), rows = (n + width - 1) / width;
    if (format == "text") {
        std::string out;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < width; ++c) {
                const std::size_t i = r * width + c;
                out += i < n ? (m.bits[i] ? '#' : '.') : ' ';
            }
            out += '\n';
        }
        return out;
    }
    if (format != "ppm") throw Error(Errc::invalid_config, "format must be text or ppm");
    const std::size_t w = width * cell, h = rows * cell;
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            const std::size_t i = (y / cell) * width + x / cell;
            const bool border = x % cell == 0 || y % cell == 0;
            unsigned char rgb[3] = {0, 0, 0};
            if (i < n && m.bits[i]) {
                rgb[0] = 250, rgb[1] = 200, rgb[2] = 40;
            } else if (i < n) {
                rgb[0] = rgb[1] = rgb[2] = 60;
            }
            if (border && i < n) rgb[0] = rgb[1] = rgb[2] = 20;
            out.append(reinterpret_cast<const char*>(rgb), 3);
        }
    return out;
}

int cmd_render(const RenderArgs& a, RunManifest& man) {
    Mask m;
    if (!a.bits.empty()) {
        for (char c : a.bits) {
            if (c == ',' || c == ' ') continue;
            if (c != '0' && c != '1') throw Error(Errc::invalid_config, "--bits takes 0/1 characters");
            m.bits.push_back(static_cast<std::uint8_t>(c - '0'));
        }
    } else if (!a.labels.empty()) {
        if (a.sample.empty()) throw Error(Errc::invalid_config, "--labels needs --sample");
        const auto labels = index_labels(io::read_labels(a.labels));
        const auto it = labels.find(a.sample);
        if (it == labels.end()) throw Error(Errc::out_of_range, "no label for sample '" + a.sample + "'");
        m = it->second.mask;
    } else if (!a.params.empty()) {
        if (a.data.empty() || a.sample.empty()) throw Error(Errc::invalid_config, "--params needs --data and --sample");
        const auto pf = io::read_params(a.params);
        const auto samples = fit_width(io::read_dataset(a.data), pf.config.d_model);
        const auto it = std::find_if(samples.begin(), samples.end(), [&](const Sample& s) { return s.id == a.sample; });
        if (it == samples.end()) throw Error(Errc::out_of_range, "no sample '" + a.sample + "'");
        m = select_top_r(forward(*it, pf.params, pf.config).probs, resolve_r(a.r, a.ratio, it->n(), nullptr));
    } else {
        throw Error(Errc::invalid_config, "give --bits, --labels or --params");
    }
    const std::size_t width = a.width ? a.width : std::max<std::size_t>(1, static_cast<std::size_t>(
                                                                               std::ceil(std::sqrt(m.bits.size()))));
    const std::string bytes = render_grid(m, width, a.format, a.cell);
    if (a.out.empty() || a.out == "-") {
        std::cout << bytes;
        return ok;
    }
    io::write_file(a.out, bytes);
    man.config = {{"width", width}, {"format", a.format}, {"cell", a.cell}};
    man.inputs = {{"bits", a.bits}, {"labels", a.labels}, {"params", a.params}, {"dataset", a.data},
                  {"sample", a.sample}};
    man.outputs = {{"image", a.out}};
    man.write(manifest_for(a.out));
    return ok;
}

/// Records the order in which masks reach the scorer.
class OrderLog final : public Scorer {
public:
    OrderLog(std::shared_ptr<const Scorer> inner, std::ostream* out) : inner_(std::move(inner)), out_(out) {}
    std::string id() const override { return inner_->id(); }
    Concurrency concurrency() const override { return inner_->concurrency(); }
    double score(const Sample& s, const GroupPartition& p, const Mask& m) const override {
        if (out_) {
            std::lock_guard lock(mu_);
            *out_ << s.id << ' ';
            for (auto b : m.bits) *out_ << static_cast<int>(b);
            *out_ << '\n';
        }
        return inner_->score(s, p, m);
    }

private:
    std::shared_ptr<const Scorer> inner_;
    std::ostream* out_;
    mutable std::mutex mu_;
};

struct BenchArgs {
    std::string data, anchors, out, order_log;
    std::vector<std::size_t> workers{1, 2, 4, 8};
    std::size_t samples = 4;
    ScorerOptions scorer;
    EvoConfig evo;
};

int cmd_bench(BenchArgs& a, RunManifest& man) {
    if (a.anchors.empty()) a.anchors = default_anchors(a.data);
    auto samples = io::read_dataset(a.data);
    if (samples.size() > a.samples) samples.resize(a.samples);
    json runs = json::array();
    if (!samples.empty()) {
        const auto anchors = io::read_anchors(a.anchors);
        const auto base = make_scorer(a.scorer, a.data, a.evo.seed);
        std::ofstream order;
        if (!a.order_log.empty()) order.open(a.order_log, std::ios::trunc);
        for (const std::size_t w : a.workers) {
            EvoConfig cfg = a.evo;
            cfg.workers = w;
            const OrderLog logged(base, (w == 1 && order) ? &order : nullptr);
            std::size_t evaluations = 0;
            json per_sample = json::array();
            const auto t0 = std::chrono::steady_clock::now();
            for (const auto& s : samples) {
                const auto ts = std::chrono::steady_clock::now();
                const auto res = search(s, partition(s, anchors), logged, cfg);
                evaluations += res.evaluations;
                per_sample.push_back(
                    {{"sample_id", s.id},
                     {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - ts).count()}});
            }
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            runs.push_back({{"workers", w},
                            {"evaluations", evaluations},
                            {"seconds", secs},
                            {"masks_per_second", secs > 0 ? evaluations / secs : 0.0},
                            {"per_sample", per_sample}});
            std::cout << "workers " << w << ": " << evaluations << " masks in " << secs << " s ("
                      << (secs > 0 ? evaluations / secs : 0.0) << " masks/s)\n";
        }
    }
    const json report{{"runs", runs}, {"latency_us", a.scorer.latency_us}, {"samples", samples.size()}};
    if (!a.out.empty()) {
        io::write_file(a.out, report.dump(2) + "\n");
        man.config = {{"evolution", evo_json(a.evo)}, {"workers", a.workers}, {"latency_us", a.scorer.latency_us}};
        man.inputs = {{"dataset", a.data}};
        man.outputs = {{"report", a.out}};
        man.write(manifest_for(a.out));
    } else if (samples.empty()) {
        std::cout << report.dump() << "\n";
    }
    return ok;
}

struct GradCheckArgs {
    std::size_t configs = 25;
    std::uint64_t seed = 0;
    double h = 1e-5;
    double tolerance = 1e-4;
    bool corrupt = false;
    std::string out;
};

int cmd_grad_check(const GradCheckArgs& a, RunManifest& man) {
    BackwardOptions bopts;
    bopts.corrupt_attention = a.corrupt;
    double worst = 0.0;
    json cases = json::array();
    for (std::size_t i = 0; i < a.configs; ++i) {
        const auto c = make_grad_check_case(a.seed, i);
        const auto r = grad_check(c.params, c.sample, c.labels, c.config, a.h, 200, a.seed, bopts);
        worst = std::max(worst, r.max_rel_error);
        cases.push_back({{"config", io::to_json(c.config)},
                         {"n", c.sample.n()},
                         {"m", c.sample.m()},
                         {"max_rel_error", r.max_rel_error},
                         {"coordinates", r.coordinates},
                         {"worst", r.worst_param}});
        std::cout << "case " << i << " d=" << c.config.d_model << " heads=" << c.config.heads
                  << " loss=" << loss_kind_name(c.config.loss) << " max_rel_error " << r.max_rel_error << "\n";
    }
    // With a corrupted gradient the check is expected to fail loudly.
    const bool passed = a.corrupt ? worst > 1e-2 : worst < a.tolerance;
    std::cout << (passed ? "PASS" : "FAIL") << " worst " << worst << "\n";
    if (!a.out.empty()) {
        io::write_file(a.out, json{{"worst", worst}, {"passed", passed}, {"cases", cases}}.dump(2) + "\n");
        man.config = {{"configs", a.configs}, {"h", a.h}, {"tolerance", a.tolerance}, {"corrupt", a.corrupt}};
        man.seeds = {{"cases", a.seed}};
        man.outputs = {{"report", a.out}};
        man.write(manifest_for(a.out));
    }
    return passed ? ok : check_failed;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"evocomp: evolutionary labelling and training of visual-token compressors"};
    app.require_subcommand(0, 1);
    app.set_version_flag("--version", kVersion);
    bool show_defaults = false;
    app.add_flag("--show-defaults", show_defaults, "Print built-in defaults and their origin");
    app.set_config("--config", "", "TOML file, one [section] per command; flags take precedence");

    RunManifest man;
    for (int i = 0; i < argc; ++i) man.argv.emplace_back(argv[i]);

    auto add_seed = [](CLI::App* sub, std::uint64_t& seed) {
        sub->add_option("--seed", seed, "Random seed")->envname("EVOCOMP_SEED")->capture_default_str();
    };

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic dataset");
    gen_cmd->add_option("--family", gen.family, "planted | pooled | text-keyed")->capture_default_str();
    gen_cmd->add_option("--n-samples", gen.cfg.samples, "Samples")->capture_default_str();
    gen_cmd->add_option("--tokens", gen.cfg.tokens, "Visual tokens per sample")->capture_default_str();
    gen_cmd->add_option("--groups", gen.cfg.groups, "Semantic groups per sample")->capture_default_str();
    gen_cmd->add_option("--dim", gen.cfg.dim, "Embedding width")->capture_default_str();
    gen_cmd->add_option("--text-tokens", gen.cfg.text_tokens, "Text tokens per sample")->capture_default_str();
    gen_cmd->add_option("--anchors", gen.cfg.anchors, "Anchor count (0: max(8, 2*groups))")->capture_default_str();
    gen_cmd->add_option("--noise", gen.cfg.noise, "Token offset radius")->capture_default_str();
    gen_cmd->add_option("--out", gen.out, "Output directory")->required();
    add_seed(gen_cmd, gen.cfg.seed);

    LabelArgs label;
    auto* label_cmd = app.add_subcommand("label", "Label samples with evolutionary search");
    label_cmd->add_option("--data", label.data, "Dataset (EVC1)")->required();
    label_cmd->add_option("--anchors", label.anchors, "Anchor file (default: anchors.evc beside the dataset)");
    label_cmd->add_option("--out", label.out, "Labels (JSON lines)")->required();
    label_cmd->add_option("--restrict", label.restrict_spec, "none | top_k=K | fraction=f");
    label_cmd->add_flag("--oracle", label.job.oracle, "Exhaustive search instead of evolution");
    label_cmd->add_option("--oracle-cap", label.job.oracle_cap, "Largest space the oracle enumerates")
        ->capture_default_str();
    label_cmd->add_option("--workers", label.job.sample_workers, "Concurrent per-sample searches")
        ->capture_default_str();
    label_cmd->add_flag("--progress", label.progress, "Per-iteration progress on stderr");
    add_scorer_options(label_cmd, label.scorer);
    add_evo_options(label_cmd, label.job.evo);
    add_seed(label_cmd, label.job.evo.seed);

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "Train the compressor on labels");
    train_cmd->add_option("--data", tr.data, "Dataset (EVC1)")->required();
    train_cmd->add_option("--labels", tr.labels, "Labels (JSON lines)")->required();
    train_cmd->add_option("--out", tr.out, "Parameter file (EVP1)")->required();
    train_cmd->add_option("--history", tr.history, "Per-epoch CSV");
    train_cmd->add_option("--donor", tr.donor, "Initialise the block from this parameter file");
    train_cmd->add_option("--loss", tr.loss, "ghm+cs | ghm | ce+cs | ce | focal+cs")->capture_default_str();
    train_cmd->add_option("--alpha", tr.cfg.alpha, "Weight of the cosine term")->capture_default_str();
    train_cmd->add_option("--epochs", tr.cfg.epochs, "Epochs")->capture_default_str();
    train_cmd->add_option("--lr", tr.cfg.lr0, "Initial learning rate (cosine decay)")->capture_default_str();
    train_cmd->add_option("--batch-size", tr.cfg.batch_size, "Samples per step")->capture_default_str();
    train_cmd->add_option("--d-model", tr.d_model, "Model width (0: dataset width)")->capture_default_str();
    train_cmd->add_option("--heads", tr.cfg.heads, "Attention heads")->capture_default_str();
    train_cmd->add_option("--mlp-ratio", tr.cfg.mlp_ratio, "Hidden width multiple")->capture_default_str();
    train_cmd->add_flag("--positions", tr.cfg.use_positions, "Rotary positions on visual and text rows");
    train_cmd->add_flag("--no-text", tr.cfg.no_text, "Visual tokens only");
    train_cmd->add_option("--ghm", tr.ghm_mode, "unit_region | exact")
        ->check(CLI::IsMember({"unit_region", "exact"}))
        ->capture_default_str();
    train_cmd->add_option("--bins", tr.bins, "Unit-region bin count")->capture_default_str();
    train_cmd->add_option("--epsilon", tr.epsilon, "Exact-density window")->capture_default_str();
    train_cmd->add_option("--momentum", tr.cfg.ghm.momentum, "Bin-count momentum")->capture_default_str();
    train_cmd->add_option("--focal-gamma", tr.cfg.focal_gamma, "Focal exponent")->capture_default_str();
    train_cmd->add_option("--focal-alpha", tr.cfg.focal_alpha, "Focal weight")->capture_default_str();
    train_cmd->add_option("--init-std", tr.cfg.init_std, "Initial weight scale")->capture_default_str();
    train_cmd->add_option("--val-fraction", tr.cfg.val_fraction, "Held-out share")->capture_default_str();
    train_cmd->add_flag("--quiet", tr.quiet, "No per-epoch log");
    add_seed(train_cmd, tr.cfg.seed);

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "Score top-r retention against labels and ground truth");
    eval_cmd->add_option("--data", ev.data, "Dataset (EVC1)")->required();
    eval_cmd->add_option("--params", ev.params, "Parameter file (EVP1)")->required();
    eval_cmd->add_option("--labels", ev.labels, "Reference labels");
    eval_cmd->add_option("--truth", ev.truth, "Planted ground truth");
    eval_cmd->add_option("--out", ev.out, "JSON report")->required();
    auto* ev_r = eval_cmd->add_option("--r", ev.r, "Tokens kept per sample");
    eval_cmd->add_option("--ratio", ev.ratio, "Share of tokens kept")->excludes(ev_r);
    add_seed(eval_cmd, ev.seed);

    CompressArgs cp;
    auto* compress_cmd = app.add_subcommand("compress", "Write a dataset reduced to the top-r visual tokens");
    compress_cmd->add_option("--data", cp.data, "Dataset (EVC1)")->required();
    compress_cmd->add_option("--params", cp.params, "Parameter file (EVP1)")->required();
    compress_cmd->add_option("--out", cp.out, "Reduced dataset (EVC1)")->required();
    auto* cp_r = compress_cmd->add_option("--r", cp.r, "Tokens kept per sample");
    compress_cmd->add_option("--ratio", cp.ratio, "Share of tokens kept")->excludes(cp_r);

    RenderArgs rd;
    auto* render_cmd = app.add_subcommand("render", "Draw a retention mask as a grid");
    render_cmd->add_option("--bits", rd.bits, "Mask as 0/1 characters");
    render_cmd->add_option("--labels", rd.labels, "Take the mask from a label file");
    render_cmd->add_option("--params", rd.params, "Predict the mask with a compressor");
    render_cmd->add_option("--data", rd.data, "Dataset for --params");
    render_cmd->add_option("--sample", rd.sample, "Sample id");
    render_cmd->add_option("--width", rd.width, "Grid width (0: ceil(sqrt(n)))");
    render_cmd->add_option("--format", rd.format, "text | ppm")->check(CLI::IsMember({"text", "ppm"}));
    render_cmd->add_option("--cell", rd.cell, "PPM cell size in pixels")->capture_default_str();
    render_cmd->add_option("--out", rd.out, "Output file (default: stdout)");
    auto* rd_r = render_cmd->add_option("--r", rd.r, "Tokens kept (with --params)");
    render_cmd->add_option("--ratio", rd.ratio, "Share kept (with --params)")->excludes(rd_r);

    BenchArgs bn;
    bn.scorer.latency_us = 1000;
    auto* bench_cmd = app.add_subcommand("bench", "Scorer throughput at several worker counts");
    bench_cmd->add_option("--data", bn.data, "Dataset (EVC1)")->required();
    bench_cmd->add_option("--anchors", bn.anchors, "Anchor file (default: anchors.evc beside the dataset)");
    bench_cmd->add_option("--out", bn.out, "JSON report");
    bench_cmd->add_option("--workers", bn.workers, "Worker counts")->delimiter(',')->capture_default_str();
    bench_cmd->add_option("--samples", bn.samples, "Samples searched per worker count")->capture_default_str();
    bench_cmd->add_option("--latency-us", bn.scorer.latency_us, "Added latency per scorer call")
        ->capture_default_str();
    bench_cmd->add_option("--order-log", bn.order_log, "Evaluation order at one worker");
    add_scorer_options(bench_cmd, bn.scorer);
    add_evo_options(bench_cmd, bn.evo);
    add_seed(bench_cmd, bn.evo.seed);

    GradCheckArgs gc;
    auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference check of the training gradients");
    grad_cmd->add_option("--configs", gc.configs, "Random configurations")->capture_default_str();
    grad_cmd->add_option("--step", gc.h, "Central-difference step")->capture_default_str();
    grad_cmd->add_option("--tolerance", gc.tolerance, "Largest accepted relative error")->capture_default_str();
    grad_cmd->add_flag("--corrupt", gc.corrupt, "Corrupt the attention gradient (must be detected)");
    grad_cmd->add_option("--out", gc.out, "JSON report");
    add_seed(grad_cmd, gc.seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? ok : usage;
    }

    try {
        if (show_defaults) {
            std::cout << defaults_json().dump(2) << "\n";
            return ok;
        }
        const auto* sub = app.get_subcommands().empty() ? nullptr : app.get_subcommands().front();
        if (!sub) {
            std::cerr << app.help();
            return usage;
        }
        man.command = sub->get_name();
        if (sub == gen_cmd) return cmd_gen(gen, man);
        if (sub == label_cmd) return cmd_label(label, man);
        if (sub == train_cmd) return cmd_train(tr, man);
        if (sub == eval_cmd) return cmd_eval(ev, man);
        if (sub == compress_cmd) return cmd_compress(cp, man);
        if (sub == render_cmd) return cmd_render(rd, man);
        if (sub == bench_cmd) return cmd_bench(bn, man);
        if (sub == grad_cmd) return cmd_grad_check(gc, man);
    } catch (const Error& e) {
        std::cerr << "evocomp: " << e.what() << "\n";
        return exit_code(e.code());
    } catch (const std::exception& e) {
        std::cerr << "evocomp: " << e.what() << "\n";
        return data;
    }
    return ok;
}
