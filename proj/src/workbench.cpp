#include "crisp/workbench.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "crisp/errors.hpp"
#include "crisp/rng.hpp"

namespace crisp {

using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Config parsing

const std::map<std::string, std::set<std::string>>& config_schema() {
    static const std::map<std::string, std::set<std::string>> schema = {
        {"protocol", {"n_ini", "n_inc", "steps"}},
        {"generator",
         {"videos_per_category", "frames_per_video", "grid", "blob_min", "blob_max",
          "motion_step", "noise_amplitude", "feature_dim"}},
        {"model", {"dim", "ffn_dim", "layers", "queries_per_category"}},
        {"train",
         {"learning_rate", "iterations_per_step", "batch_size", "seed", "lambda_isc",
          "lambda_ic", "no_object_weight", "gradient_clip", "init_strategy",
          "similarity", "finetune"}},
        {"ablation", {"use_arsp", "use_isc", "use_ic"}},
        {"output", {"dir"}},
    };
    return schema;
}

std::string trim(const std::string& s) {
    std::size_t begin = s.find_first_not_of(" \t");
    if (begin == std::string::npos) return "";
    std::size_t end = s.find_last_not_of(" \t");
    return s.substr(begin, end - begin + 1);
}

struct ConfigCursor {
    const std::string& name;
    std::size_t line = 0;
    std::size_t col = 1;

    [[noreturn]] void fail(const std::string& message) const {
        throw ConfigError(name + ":" + std::to_string(line) + ":" +
                          std::to_string(col) + ": " + message);
    }
};

std::uint64_t parse_u64(const std::string& value, const std::string& where,
                        const ConfigCursor& at) {
    std::uint64_t parsed = 0;
    const char* begin = value.data();
    const char* end = begin + value.size();
    auto [ptr, ec] = std::from_chars(begin, end, parsed);
    if (ec != std::errc{} || ptr != end) {
        at.fail("invalid value \"" + value + "\" for " + where);
    }
    return parsed;
}

std::size_t parse_count(const std::string& value, const std::string& where,
                        const ConfigCursor& at) {
    return static_cast<std::size_t>(parse_u64(value, where, at));
}

double parse_real(const std::string& value, const std::string& where,
                  const ConfigCursor& at) {
    char* end = nullptr;
    double parsed = std::strtod(value.c_str(), &end);
    if (end != value.c_str() + value.size() || value.empty() ||
        !std::isfinite(parsed)) {
        at.fail("invalid value \"" + value + "\" for " + where);
    }
    return parsed;
}

bool parse_flag(const std::string& value, const std::string& where,
                const ConfigCursor& at) {
    if (value == "true") return true;
    if (value == "false") return false;
    at.fail("invalid value \"" + value + "\" for " + where +
            " (expected true or false)");
}

InitStrategy parse_init(const std::string& value, const ConfigCursor& at) {
    if (value == "pca") return InitStrategy::pca;
    if (value == "replicate_average") return InitStrategy::replicate_average;
    at.fail("invalid value \"" + value +
            "\" for train.init_strategy (expected pca or replicate_average)");
}

Similarity parse_similarity(const std::string& value, const ConfigCursor& at) {
    if (value == "frobenius") return Similarity::frobenius;
    if (value == "row_cosine") return Similarity::row_cosine;
    at.fail("invalid value \"" + value +
            "\" for train.similarity (expected frobenius or row_cosine)");
}

void assign_key(ExperimentConfig& cfg, const std::string& section,
                const std::string& key, const std::string& value,
                const ConfigCursor& at) {
    const std::string where = section + "." + key;
    if (section == "protocol") {
        if (key == "n_ini") cfg.n_ini = parse_count(value, where, at);
        else if (key == "n_inc") cfg.n_inc = parse_count(value, where, at);
        else cfg.steps = parse_count(value, where, at);
    } else if (section == "generator") {
        GeneratorConfig& g = cfg.generator;
        if (key == "videos_per_category") g.videos_per_category = parse_count(value, where, at);
        else if (key == "frames_per_video") g.frames_per_video = parse_count(value, where, at);
        else if (key == "grid") g.grid = parse_count(value, where, at);
        else if (key == "blob_min") g.blob_min = parse_count(value, where, at);
        else if (key == "blob_max") g.blob_max = parse_count(value, where, at);
        else if (key == "motion_step") g.motion_step = parse_count(value, where, at);
        else if (key == "noise_amplitude") g.noise_amplitude = parse_real(value, where, at);
        else g.feature_dim = parse_count(value, where, at);
    } else if (section == "model") {
        ModelConfig& m = cfg.model;
        if (key == "dim") m.dim = parse_count(value, where, at);
        else if (key == "ffn_dim") m.ffn_dim = parse_count(value, where, at);
        else if (key == "layers") m.layers = parse_count(value, where, at);
        else m.queries_per_category = parse_count(value, where, at);
    } else if (section == "train") {
        TrainConfig& t = cfg.train;
        if (key == "learning_rate") t.learning_rate = parse_real(value, where, at);
        else if (key == "iterations_per_step") t.iterations_per_step = parse_count(value, where, at);
        else if (key == "batch_size") t.batch_size = parse_count(value, where, at);
        else if (key == "seed") t.seed = parse_u64(value, where, at);
        else if (key == "lambda_isc") t.weights.lambda_isc = parse_real(value, where, at);
        else if (key == "lambda_ic") t.weights.lambda_ic = parse_real(value, where, at);
        else if (key == "no_object_weight") t.no_object_weight = parse_real(value, where, at);
        else if (key == "gradient_clip") t.gradient_clip = parse_real(value, where, at);
        else if (key == "init_strategy") t.init_strategy = parse_init(value, at);
        else if (key == "similarity") t.similarity = parse_similarity(value, at);
        else t.finetune = parse_flag(value, where, at);
    } else if (section == "ablation") {
        AblationFlags& f = cfg.train.flags;
        if (key == "use_arsp") f.use_arsp = parse_flag(value, where, at);
        else if (key == "use_isc") f.use_isc = parse_flag(value, where, at);
        else f.use_ic = parse_flag(value, where, at);
    } else {  // output
        cfg.output_dir = value;
    }
}

// ---------------------------------------------------------------------------
// Small file helpers

void write_file(const std::string& path, const std::string& content,
                const char* op) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(std::string(op) + ": cannot write " + path);
    out << content;
    out.flush();
    if (!out.good()) throw IoError(std::string(op) + ": write to " + path + " failed");
}

void ensure_dir(const std::string& dir, const char* op) {
    if (dir.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw IoError(std::string(op) + ": cannot create directory " + dir + ": " +
                      ec.message());
    }
}

std::string join_path(const std::string& dir, const std::string& file) {
    if (dir.empty()) return file;
    return (std::filesystem::path(dir) / file).string();
}

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::string& name) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    std::set<std::string> seen;
    ConfigCursor at{name};

    while (std::getline(in, line)) {
        ++at.line;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::size_t first = line.find_first_not_of(" \t");
        if (first == std::string::npos) continue;
        at.col = first + 1;
        char lead = line[first];
        if (lead == '#' || lead == ';') continue;

        if (lead == '[') {
            std::size_t close = line.find(']', first);
            if (close == std::string::npos) {
                at.fail("missing ']' in section header");
            }
            section = line.substr(first + 1, close - first - 1);
            if (config_schema().find(section) == config_schema().end()) {
                at.fail("unknown section [" + section + "]");
            }
            std::size_t rest = line.find_first_not_of(" \t", close + 1);
            if (rest != std::string::npos) {
                at.col = rest + 1;
                at.fail("unexpected text after section header");
            }
            continue;
        }

        std::size_t eq = line.find('=');
        if (eq == std::string::npos) at.fail("expected key = value");
        std::string key = trim(line.substr(first, eq - first));
        std::string value = trim(line.substr(eq + 1));
        if (section.empty()) at.fail("key \"" + key + "\" before any section");
        if (key.empty()) at.fail("empty key");
        const std::set<std::string>& allowed = config_schema().at(section);
        if (allowed.find(key) == allowed.end()) {
            at.fail("unknown key \"" + key + "\" in [" + section + "]");
        }
        if (!seen.insert(section + "." + key).second) {
            at.fail("duplicate key \"" + key + "\" in [" + section + "]");
        }
        std::size_t val_begin = line.find_first_not_of(" \t", eq + 1);
        at.col = (val_begin == std::string::npos ? eq + 2 : val_begin + 1);
        if (value.empty()) at.fail("empty value for \"" + key + "\"");
        assign_key(cfg, section, key, value, at);
    }

    if (cfg.generator.feature_dim != cfg.model.dim) {
        throw ConfigError(name + ": generator.feature_dim (" +
                          std::to_string(cfg.generator.feature_dim) +
                          ") must equal model.dim (" + std::to_string(cfg.model.dim) +
                          ")");
    }
    // Category universe and data seed follow from protocol + train seed so
    // every ablation of one config shares the same dataset.
    cfg.generator.num_categories =
        cfg.n_ini + cfg.n_inc * (cfg.steps > 0 ? cfg.steps - 1 : 0);
    cfg.generator.seed = derive_seed(cfg.train.seed, "generator");
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_config: cannot open " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str(), path);
}

ClassIncrementalProtocol protocol_of(const ExperimentConfig& config) {
    return make_protocol(config.n_ini, config.n_inc, config.steps);
}

std::string step_dataset_path(const ExperimentConfig& config, std::size_t t) {
    return join_path(config.output_dir, "step" + std::to_string(t) + ".json");
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kCheckpointHeader = "crisp-checkpoint v1";

void put_matrix(std::ostream& out, const char* tag, const Matrix& m) {
    out << tag << '\n' << to_text(m);
}

struct CheckpointReader {
    std::ifstream in;
    std::string path;

    [[noreturn]] void fail(const std::string& message) {
        throw IoError("load_checkpoint: " + message + " in " + path);
    }
    void expect(const char* tag) {
        std::string token;
        if (!(in >> token) || token != tag) {
            fail("expected \"" + std::string(tag) + "\"");
        }
    }
    template <typename T>
    T number(const char* what) {
        T value{};
        if (!(in >> value)) fail(std::string("missing ") + what);
        return value;
    }
    Matrix matrix(const char* tag) {
        expect(tag);
        try {
            return matrix_from_text(in);
        } catch (const Error& e) {
            fail(std::string("bad matrix after \"") + tag + "\": " + e.what());
        }
    }
};

}  // namespace

void save_checkpoint(const ContinualState& state, const std::string& path) {
    std::ostringstream out;
    out << kCheckpointHeader << '\n';
    out << "model " << state.model.dim << ' ' << state.model.ffn_dim << ' '
        << state.model.layers << ' ' << state.model.queries_per_category << '\n';
    out << "completed_steps " << state.completed_steps << '\n';
    out << "step_open " << (state.step_open ? 1 : 0) << '\n';
    out << "seen_categories " << state.seen_categories.size();
    for (std::size_t c : state.seen_categories) out << ' ' << c;
    out << '\n';
    out << "generator_seed " << state.generator.seed << '\n';

    out << "decoder_layers " << state.decoder.layers.size() << '\n';
    for (const DecoderLayer& layer : state.decoder.layers) {
        put_matrix(out, "w_q", layer.w_q);
        put_matrix(out, "w_k", layer.w_k);
        put_matrix(out, "w_v", layer.w_v);
        put_matrix(out, "w_o", layer.w_o);
        put_matrix(out, "ffn_w1", layer.ffn_w1);
        put_matrix(out, "ffn_b1", layer.ffn_b1);
        put_matrix(out, "ffn_w2", layer.ffn_w2);
        put_matrix(out, "ffn_b2", layer.ffn_b2);
    }
    put_matrix(out, "class_head", state.decoder.class_head);
    put_matrix(out, "mask_embed_head", state.decoder.mask_embed_head);

    put_matrix(out, "queries", state.queries.matrix);
    out << "segments " << state.queries.segments.size() << '\n';
    for (const QuerySegment& seg : state.queries.segments) {
        out << "segment " << seg.task << ' ' << seg.row_begin << ' ' << seg.row_end
            << ' ' << (seg.frozen ? 1 : 0) << '\n';
    }
    put_matrix(out, "snapshot", state.queries.step_start_snapshot);

    out << "pools " << state.pools.size() << '\n';
    for (const PromptPool& pool : state.pools) {
        out << "pool " << pool.task_id << ' ' << (pool.trainable ? 1 : 0) << ' '
            << pool.category_names.size() << '\n';
        for (const std::string& name : pool.category_names) out << name << '\n';
        put_matrix(out, "tokens", pool.tokens);
    }
    out << "end\n";
    write_file(path, out.str(), "save_checkpoint");
}

ContinualState load_checkpoint(const std::string& path) {
    CheckpointReader r{std::ifstream(path, std::ios::binary), path};
    if (!r.in) throw IoError("load_checkpoint: cannot open " + path);
    std::string header;
    std::getline(r.in, header);
    if (!header.empty() && header.back() == '\r') header.pop_back();
    if (header != kCheckpointHeader) {
        throw IoError("load_checkpoint: unsupported header \"" + header +
                      "\" in " + path + " (expected \"" + kCheckpointHeader + "\")");
    }

    ContinualState state;
    r.expect("model");
    state.model.dim = r.number<std::size_t>("model.dim");
    state.model.ffn_dim = r.number<std::size_t>("model.ffn_dim");
    state.model.layers = r.number<std::size_t>("model.layers");
    state.model.queries_per_category = r.number<std::size_t>("model.queries");
    r.expect("completed_steps");
    state.completed_steps = r.number<std::size_t>("completed_steps");
    r.expect("step_open");
    state.step_open = r.number<int>("step_open") != 0;
    r.expect("seen_categories");
    std::size_t n_seen = r.number<std::size_t>("seen category count");
    for (std::size_t i = 0; i < n_seen; ++i) {
        state.seen_categories.push_back(r.number<std::size_t>("seen category"));
    }
    r.expect("generator_seed");
    std::uint64_t generator_seed = r.number<std::uint64_t>("generator_seed");
    state.generator = PromptGenerator::make(generator_seed, state.model.dim);

    r.expect("decoder_layers");
    std::size_t n_layers = r.number<std::size_t>("layer count");
    for (std::size_t l = 0; l < n_layers; ++l) {
        DecoderLayer layer;
        layer.w_q = r.matrix("w_q");
        layer.w_k = r.matrix("w_k");
        layer.w_v = r.matrix("w_v");
        layer.w_o = r.matrix("w_o");
        layer.ffn_w1 = r.matrix("ffn_w1");
        layer.ffn_b1 = r.matrix("ffn_b1");
        layer.ffn_w2 = r.matrix("ffn_w2");
        layer.ffn_b2 = r.matrix("ffn_b2");
        state.decoder.layers.push_back(std::move(layer));
    }
    state.decoder.class_head = r.matrix("class_head");
    state.decoder.mask_embed_head = r.matrix("mask_embed_head");

    state.queries.matrix = r.matrix("queries");
    r.expect("segments");
    std::size_t n_segments = r.number<std::size_t>("segment count");
    for (std::size_t i = 0; i < n_segments; ++i) {
        r.expect("segment");
        QuerySegment seg;
        seg.task = r.number<std::size_t>("segment task");
        seg.row_begin = r.number<std::size_t>("segment row_begin");
        seg.row_end = r.number<std::size_t>("segment row_end");
        seg.frozen = r.number<int>("segment frozen") != 0;
        state.queries.segments.push_back(seg);
    }
    state.queries.step_start_snapshot = r.matrix("snapshot");

    r.expect("pools");
    std::size_t n_pools = r.number<std::size_t>("pool count");
    for (std::size_t i = 0; i < n_pools; ++i) {
        r.expect("pool");
        PromptPool pool;
        pool.task_id = r.number<std::size_t>("pool task");
        pool.trainable = r.number<int>("pool trainable") != 0;
        std::size_t n_names = r.number<std::size_t>("pool name count");
        for (std::size_t k = 0; k < n_names; ++k) {
            std::string name;
            if (!(r.in >> name)) r.fail("missing category name");
            pool.category_names.push_back(name);
        }
        pool.tokens = r.matrix("tokens");
        pool.prompts =
            generate_prompts(state.generator, pool.category_names, pool.tokens);
        state.pools.push_back(std::move(pool));
    }
    r.expect("end");
    return state;
}

// ---------------------------------------------------------------------------
// Commands

void cmd_generate(const ExperimentConfig& config, bool force) {
    ClassIncrementalProtocol protocol = protocol_of(config);
    std::vector<std::string> paths;
    for (std::size_t t = 0; t < protocol.steps; ++t) {
        paths.push_back(step_dataset_path(config, t));
    }
    if (!force) {
        for (const std::string& path : paths) {
            if (std::filesystem::exists(path)) {
                throw IoError("generate: " + path + " exists (use --force)");
            }
        }
    }
    ensure_dir(config.output_dir, "generate");
    for (std::size_t t = 0; t < protocol.steps; ++t) {
        GeneratorConfig g = config.generator;
        g.seed = derive_seed(derive_seed(config.train.seed, "generator"), t);
        Dataset dataset = generate_dataset(g, protocol.class_sets[t]);
        save_dataset(dataset, paths[t]);
    }
}

namespace {

json eval_to_json(const StepMetrics& metrics) {
    json category_ap = json::object();
    for (const auto& [c, ap] : metrics.eval.category_ap) {
        category_ap[std::to_string(c)] = ap;
    }
    return json{{"step", metrics.step},        {"classes", metrics.classes},
                {"map", metrics.eval.map},     {"ap50", metrics.eval.ap50},
                {"ap75", metrics.eval.ap75},   {"ar1", metrics.eval.ar1},
                {"ar10", metrics.eval.ar10},   {"category_ap", category_ap}};
}

}  // namespace

ExperimentReport cmd_run(const ExperimentConfig& config, const RunOptions& options) {
    ClassIncrementalProtocol protocol = protocol_of(config);
    std::vector<Dataset> datasets;
    for (std::size_t t = 0; t < protocol.steps; ++t) {
        std::string path = step_dataset_path(config, t);
        if (!std::filesystem::exists(path)) {
            throw IoError("run: missing dataset " + path + " (run generate first)");
        }
        datasets.push_back(load_dataset(path));
    }
    ensure_dir(config.output_dir, "run");

    ExperimentReport report = run_protocol(
        protocol, datasets, config.model, config.train,
        [&](const ContinualState& state, std::size_t t) {
            save_checkpoint(state, join_path(config.output_dir,
                                             "checkpoint-step" + std::to_string(t) +
                                                 ".txt"));
        },
        options.workers);

    std::ostringstream log;
    for (std::size_t t = 0; t < report.training_logs.size(); ++t) {
        for (const IterationLog& entry : report.training_logs[t]) {
            json line{{"step", t},
                      {"iteration", entry.iteration},
                      {"batch", entry.batch},
                      {"seg", entry.loss.seg},
                      {"isc", entry.loss.isc},
                      {"ic", entry.loss.ic},
                      {"ic_aux", entry.loss.ic_aux},
                      {"total", entry.loss.total}};
            log << line.dump() << '\n';
        }
    }
    write_file(join_path(config.output_dir, "train_log.jsonl"), log.str(), "run");

    FrResult fr = forgetting_ratio(report.ledger, options.fr_indicator);
    json out;
    out["protocol"] =
        json{{"n_ini", config.n_ini}, {"n_inc", config.n_inc}, {"steps", config.steps}};
    out["steps"] = json::array();
    for (const StepMetrics& metrics : report.steps) {
        out["steps"].push_back(eval_to_json(metrics));
    }
    out["forgetting_ratio"] = fr.value;
    out["fr_indicator"] =
        options.fr_indicator == FrIndicator::corrected ? "corrected" : "literal";
    out["fr_skipped_zero_first"] = fr.skipped_zero_first;
    write_file(join_path(config.output_dir, "report.json"), out.dump(2) + "\n", "run");
    return report;
}

void cmd_diagnose(const std::string& checkpoint_path, const std::string& out_dir) {
    ContinualState state = load_checkpoint(checkpoint_path);
    std::string dir = out_dir;
    if (dir.empty()) {
        dir = std::filesystem::path(checkpoint_path).parent_path().string();
    }
    ensure_dir(dir, "diagnose");

    const Matrix& q = state.queries.matrix;
    if (q.rows() < 2) {
        throw ContractError("diagnose: checkpoint holds fewer than 2 queries");
    }
    write_file(join_path(dir, "correlation.txt"), to_text(query_correlation(q)),
               "diagnose");

    Matrix dist(q.rows(), q.rows());
    for (std::size_t i = 0; i < q.rows(); ++i) {
        for (std::size_t j = 0; j < q.rows(); ++j) {
            double ss = 0.0;
            for (std::size_t k = 0; k < q.cols(); ++k) {
                double d = q(i, k) - q(j, k);
                ss += d * d;
            }
            dist(i, j) = std::sqrt(ss);
        }
    }
    write_file(join_path(dir, "distances.txt"), to_text(dist), "diagnose");

    std::vector<std::string> labels(q.rows());
    for (const QuerySegment& seg : state.queries.segments) {
        for (std::size_t r = seg.row_begin; r < seg.row_end; ++r) {
            labels[r] = "task" + std::to_string(seg.task) + "-q" +
                        std::to_string(r - seg.row_begin);
        }
    }
    export_embeddings(q, labels, join_path(dir, "embeddings.csv"));
}

std::string cmd_report(const std::string& report_path) {
    std::ifstream in(report_path, std::ios::binary);
    if (!in) throw IoError("report: cannot open " + report_path);
    json parsed;
    try {
        in >> parsed;
    } catch (const json::exception& e) {
        throw IoError("report: cannot parse " + report_path + ": " + e.what());
    }

    std::ostringstream out;
    char buffer[256];
    try {
        for (const json& step : parsed.at("steps")) {
            std::string classes;
            for (const json& c : step.at("classes")) {
                classes += (classes.empty() ? "" : ",") +
                           std::to_string(c.get<std::size_t>());
            }
            std::snprintf(buffer, sizeof(buffer),
                          "step %zu  classes [%s]  mAP %6.2f  AP50 %6.2f  AP75 %6.2f"
                          "  AR1 %6.2f  AR10 %6.2f\n",
                          step.at("step").get<std::size_t>(), classes.c_str(),
                          100.0 * step.at("map").get<double>(),
                          100.0 * step.at("ap50").get<double>(),
                          100.0 * step.at("ap75").get<double>(),
                          100.0 * step.at("ar1").get<double>(),
                          100.0 * step.at("ar10").get<double>());
            out << buffer;
        }
        std::snprintf(buffer, sizeof(buffer),
                      "forgetting ratio %.6f (%s indicator, %zu zero-first "
                      "categories skipped)\n",
                      parsed.at("forgetting_ratio").get<double>(),
                      parsed.at("fr_indicator").get<std::string>().c_str(),
                      parsed.at("fr_skipped_zero_first").get<std::size_t>());
        out << buffer;
    } catch (const json::exception& e) {
        throw IoError("report: " + report_path + " does not match the report schema: " +
                      e.what());
    }
    return out.str();
}

}  // namespace crisp
