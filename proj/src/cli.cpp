#include "malimg/cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>

#include "malimg/analysis.hpp"
#include "malimg/checkpoint.hpp"
#include "malimg/csv.hpp"
#include "malimg/error.hpp"
#include "malimg/hashing.hpp"
#include "malimg/trainer.hpp"

namespace malimg {

namespace {

namespace fs = std::filesystem;

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// Provenance record written last, listing every output with its checksum.
struct RunManifest {
    std::string command;
    std::vector<std::string> argv;
    std::string started = utc_now();
    std::optional<std::string> config_hash;
    std::optional<std::uint64_t> seed;
    std::vector<fs::path> inputs;
    std::vector<fs::path> outputs;

    void write(const fs::path& path) const {
        nlohmann::json j;
        j["command"] = command;
        j["argv"] = argv;
        j["started"] = started;
        j["finished"] = utc_now();
        if (config_hash) j["config_hash"] = *config_hash;
        if (seed) j["seed"] = *seed;
        auto& in = j["inputs"] = nlohmann::json::array();
        for (const auto& p : inputs) in.push_back(p.string());
        auto& out = j["outputs"] = nlohmann::json::array();
        std::set<fs::path> seen;
        for (const auto& p : outputs) {
            if (!seen.insert(p).second || !fs::is_regular_file(p)) continue;
            out.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}, {"bytes", fs::file_size(p)}});
        }
        write_file_atomic(path, j.dump(2) + "\n");
    }
};

std::vector<fs::path> files_under(const fs::path& dir, const fs::path& skip) {
    std::vector<fs::path> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.is_regular_file() && e.path() != skip) out.push_back(e.path());
    }
    std::sort(out.begin(), out.end());
    return out;
}

void write_text(const fs::path& path, const std::string& text) { write_file_atomic(path, text); }

nlohmann::json read_json(const fs::path& path) { return read_json_file(path); }

// Training flags mirror TrainConfig keys; unset flags leave the config file's values.
struct TrainFlags {
    std::optional<std::string> preset;
    std::optional<std::size_t> input_size, families, embedding_channels, head_width, residual_blocks;
    std::optional<double> dropout_rate, leaky_slope;
    std::optional<double> beta, lambda_weight, log_epsilon;
    std::optional<bool> normalize_targets;
    std::optional<double> tau, tau_start;
    std::optional<std::uint64_t> warmup_steps;
    std::optional<std::size_t> block_size;
    std::optional<double> mask_ratio;
    std::optional<std::size_t> batch_size;
    std::optional<double> learning_rate, train_fraction;
    std::optional<std::uint64_t> max_steps, seed, checkpoint_every;
    std::optional<std::string> mode;

    void add_to(CLI::App& app) {
        const TrainConfig d;
        const auto def = [](auto v) {
            std::ostringstream s;
            s << v;
            return s.str();
        };
        app.add_option("--preset", preset, "Model preset: reference (400x400 input) or desk (100x100)")
            ->check(CLI::IsMember({"reference", "desk"}))
            ->default_str("reference");
        app.add_option("--input-size", input_size, "Image side fed to the encoder")->default_str(def(d.model.input_size));
        app.add_option("--families", families, "Number of output classes (default: corpus family count)");
        app.add_option("--dropout-rate", dropout_rate, "Dropout after every conv and residual block")
            ->default_str(def(d.model.dropout_rate));
        app.add_option("--leaky-slope", leaky_slope, "Negative slope of the leaky ReLU")
            ->default_str(def(d.model.leaky_slope));
        app.add_option("--embedding-channels", embedding_channels, "Channels of the linear embedding layer")
            ->default_str(def(d.model.embedding_channels));
        app.add_option("--head-width", head_width, "Width of the residual classifier head")
            ->default_str(def(d.model.head_width));
        app.add_option("--residual-blocks", residual_blocks, "Residual blocks in the head")
            ->default_str(def(d.model.residual_blocks));
        app.add_option("--beta", beta, "Smooth-L1 knee of the masked-prediction loss")->default_str(def(d.loss.beta));
        app.add_option("--lambda-weight", lambda_weight, "Weight of the masked-prediction term in the total loss")
            ->default_str(def(d.loss.lambda_weight));
        app.add_option("--log-epsilon", log_epsilon, "Probability floor inside the cross-entropy log")
            ->default_str(def(d.loss.log_epsilon));
        app.add_option("--normalize-targets", normalize_targets, "Standardize teacher targets per sample")
            ->default_str("false");
        app.add_option("--tau", tau, "Teacher moving-average multiplier")->default_str(def(d.ema.tau));
        app.add_option("--warmup-steps", warmup_steps, "Linear ramp of tau from --tau-start (0 disables)")
            ->default_str(def(d.ema.warmup_steps));
        app.add_option("--tau-start", tau_start, "Initial tau when warming up")->default_str(def(d.ema.tau_start));
        app.add_option("--block-size", block_size, "Side of a square mask block in pixels")
            ->default_str(def(d.mask.block_size));
        app.add_option("--mask-ratio", mask_ratio, "Fraction of blocks masked for the student")
            ->default_str(def(d.mask.mask_ratio));
        app.add_option("--batch-size", batch_size, "Samples per step")->default_str(def(d.batch_size));
        app.add_option("--learning-rate", learning_rate, "Adam step size")->default_str(def(d.learning_rate));
        app.add_option("--max-steps", max_steps, "Optimizer steps")->default_str(def(d.max_steps));
        app.add_option("--seed", seed, "Seed of every random stream")->default_str(def(d.seed));
        app.add_option("--mode", mode, "composite (cross-entropy + masked prediction) or ce_only")
            ->check(CLI::IsMember({"composite", "ce_only"}))
            ->default_str("composite");
        app.add_option("--checkpoint-every", checkpoint_every, "Checkpoint interval in steps (0: start and end only)")
            ->default_str(def(d.checkpoint_every));
        app.add_option("--train-fraction", train_fraction, "Per-family share of samples used for training")
            ->default_str(def(d.train_fraction));
    }

    void apply(TrainConfig& c) const {
        if (input_size) c.model.input_size = *input_size;
        if (families) c.model.families = *families;
        if (dropout_rate) c.model.dropout_rate = *dropout_rate;
        if (leaky_slope) c.model.leaky_slope = *leaky_slope;
        if (embedding_channels) c.model.embedding_channels = *embedding_channels;
        if (head_width) c.model.head_width = *head_width;
        if (residual_blocks) c.model.residual_blocks = *residual_blocks;
        if (beta) c.loss.beta = *beta;
        if (lambda_weight) c.loss.lambda_weight = *lambda_weight;
        if (log_epsilon) c.loss.log_epsilon = *log_epsilon;
        if (normalize_targets) c.loss.normalize_targets = *normalize_targets;
        if (tau) c.ema.tau = *tau;
        if (warmup_steps) c.ema.warmup_steps = *warmup_steps;
        if (tau_start) c.ema.tau_start = *tau_start;
        if (block_size) c.mask.block_size = *block_size;
        if (mask_ratio) c.mask.mask_ratio = *mask_ratio;
        if (batch_size) c.batch_size = *batch_size;
        if (learning_rate) c.learning_rate = *learning_rate;
        if (max_steps) c.max_steps = *max_steps;
        if (seed) c.seed = *seed;
        if (mode) c.mode = parse_train_mode(*mode);
        if (checkpoint_every) c.checkpoint_every = *checkpoint_every;
        if (train_fraction) c.train_fraction = *train_fraction;
    }
};

TrainConfig desk_preset() {
    TrainConfig c;
    c.model = ModelConfig::desk_scale();
    c.mask.block_size = 4;
    return c;
}

// Resolves the checkpoint of a run: explicit path, or the latest one.
fs::path resolve_checkpoint(const std::optional<fs::path>& checkpoint, const std::optional<fs::path>& run) {
    if (checkpoint) {
        if (!fs::exists(*checkpoint)) throw Error(ErrorKind::MissingFile, "no checkpoint at '" + checkpoint->string() + "'");
        return *checkpoint;
    }
    if (!run) throw Error(ErrorKind::BadSpec, "pass --run or --checkpoint");
    return latest_checkpoint(*run);
}

// Samples of one split of a training run, read back through split.json.
LabeledCorpus run_split(const fs::path& run, const std::string& which, const std::optional<fs::path>& corpus_dir,
                        std::size_t side, std::vector<fs::path>& inputs) {
    const auto split_path = run / "split.json";
    const auto split = read_json(split_path);
    inputs.push_back(split_path);
    const fs::path dir = corpus_dir ? *corpus_dir : fs::path(split.at("corpus").get<std::string>());
    inputs.push_back(dir / "index.json");
    LabeledCorpus corpus = read_corpus_cache(dir, side);
    if (which == "all") return corpus;
    return select_samples(corpus, split.at(which).get<std::vector<std::string>>());
}

int cmd_convert(const std::vector<std::string>& inputs, const std::optional<fs::path>& manifest_csv,
                const std::optional<fs::path>& root, const fs::path& out, std::size_t side, bool png,
                RunManifest& manifest) {
    struct Item {
        fs::path path;
        std::string family;
    };
    std::vector<Item> items;
    if (manifest_csv) {
        manifest.inputs.push_back(*manifest_csv);
        const fs::path base = root ? *root : manifest_csv->parent_path();
        for (const auto& row : read_manifest(*manifest_csv)) items.push_back({base / row.path, row.family});
    }
    for (const auto& p : inputs) items.push_back({p, {}});
    if (items.empty()) throw Error(ErrorKind::BadSpec, "nothing to convert: give input files or --manifest");

    std::set<std::string> names;
    for (const auto& it : items) {
        if (!it.family.empty()) names.insert(it.family);
    }
    LabeledCorpus corpus;
    corpus.family_names.assign(names.begin(), names.end());
    std::vector<std::string> failures;
    for (const auto& it : items) {
        manifest.inputs.push_back(it.path);
        try {
            ByteStream bytes = read_byte_stream(it.path);
            GrayImage image = binary_to_image(bytes, side);
            int family = -1;
            if (!it.family.empty()) {
                family = static_cast<int>(std::distance(corpus.family_names.begin(),
                                                        std::find(corpus.family_names.begin(),
                                                                  corpus.family_names.end(), it.family)));
            }
            corpus.samples.push_back({std::move(image), family, it.path.string()});
        } catch (const Error& e) {
            failures.push_back(it.path.string() + ": " + e.what());
        }
    }
    fs::create_directories(out);
    write_corpus_cache(corpus, out);
    manifest.outputs.push_back(out / "index.json");
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%06zu", i);
        manifest.outputs.push_back(out / "images" / (std::string(name) + ".bimg"));
        if (png) {
            fs::create_directories(out / "png");
            const auto p = out / "png" / (std::string(name) + ".png");
            write_png(corpus.samples[i].image, p);
            manifest.outputs.push_back(p);
        }
    }
    manifest.write(out / "manifest.json");
    std::cout << "converted " << corpus.size() << " of " << items.size() << " inputs into " << out.string() << "\n";
    if (!failures.empty()) {
        for (const auto& f : failures) std::cerr << "failed: " << f << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

int cmd_synth(std::size_t families, std::size_t per_family, std::uint64_t seed, std::size_t side, const fs::path& out,
              bool png, RunManifest& manifest) {
    const LabeledCorpus corpus = synth_corpus(families, per_family, seed, side);
    write_corpus_cache(corpus, out);
    manifest.seed = seed;
    manifest.outputs.push_back(out / "index.json");
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "%06zu", i);
        manifest.outputs.push_back(out / "images" / (std::string(name) + ".bimg"));
        if (png) {
            fs::create_directories(out / "png");
            const auto p = out / "png" / (std::string(name) + ".png");
            write_png(corpus.samples[i].image, p);
            manifest.outputs.push_back(p);
        }
    }
    manifest.write(out / "manifest.json");
    std::cout << "wrote " << corpus.size() << " synthetic samples (" << families << " families) to " << out.string()
              << "\n";
    return kExitOk;
}

int cmd_train(const std::optional<fs::path>& config_path, const fs::path& corpus_dir, const fs::path& out_root,
              const TrainFlags& flags, bool resume, RunManifest& manifest) {
    TrainConfig config = flags.preset && *flags.preset == "desk" ? desk_preset() : TrainConfig{};
    bool families_given = flags.families.has_value();
    if (config_path) {
        const auto j = read_json(*config_path);
        from_json(j, config);
        manifest.inputs.push_back(*config_path);
        families_given = families_given || (j.contains("model") && j["model"].contains("families"));
    }
    flags.apply(config);

    manifest.inputs.push_back(corpus_dir / "index.json");
    const LabeledCorpus corpus = read_corpus_cache(corpus_dir, config.model.input_size);
    if (!families_given) config.model.families = corpus.family_count();
    config.validate();
    corpus.validate();

    const auto [train_set, test_set] = stratified_split(corpus, {config.train_fraction, config.seed});
    const std::string hash = config_hash(config);
    const fs::path run = out_root / (hash + "-seed" + std::to_string(config.seed));
    manifest.config_hash = hash;
    manifest.seed = config.seed;

    RunOptions options;
    options.run_dir = run;
    if (resume && fs::exists(run / "checkpoints")) options.resume_from = latest_checkpoint(run);
    if (!resume && fs::exists(run)) fs::remove_all(run);
    fs::create_directories(run);
    write_text(run / "config.json", nlohmann::json(config).dump(2) + "\n");
    nlohmann::json split{{"corpus", fs::absolute(corpus_dir).lexically_normal().string()},
                         {"train_fraction", config.train_fraction},
                         {"seed", config.seed}};
    auto ids = [](const LabeledCorpus& c) {
        std::vector<std::string> v;
        for (const auto& s : c.samples) v.push_back(s.source_id);
        return v;
    };
    split["train"] = ids(train_set);
    split["test"] = ids(test_set);
    write_text(run / "split.json", split.dump(2) + "\n");

    const auto progress_every = std::max<std::uint64_t>(1, config.max_steps / 20);
    options.on_step = [&](const MetricsRecord& r) {
        if ((r.step + 1) % progress_every == 0 || r.step + 1 == config.max_steps) {
            std::cerr << "step " << r.step + 1 << "/" << config.max_steps << " ce " << r.ce << " d2v " << r.d2v
                      << " composite " << r.composite << "\n";
        }
    };
    const TrainResult result = train(config, train_set, test_set, options);
    manifest.outputs = files_under(run, run / "manifest.json");
    manifest.write(run / "manifest.json");
    std::cout << run.string() << "\n";
    if (result.report) std::cout << "test accuracy " << result.report->accuracy << "\n";
    return kExitOk;
}

int cmd_eval(const std::optional<fs::path>& run, const std::optional<fs::path>& checkpoint,
             const std::optional<fs::path>& corpus_dir, const std::string& which, const std::optional<fs::path>& out,
             RunManifest& manifest) {
    const fs::path ckpt = resolve_checkpoint(checkpoint, run);
    manifest.inputs.push_back(ckpt);
    const StudentCheckpoint model = load_student(ckpt);
    LabeledCorpus corpus;
    if (run) {
        corpus = run_split(*run, which, corpus_dir, model.model.input_size, manifest.inputs);
    } else if (corpus_dir) {
        manifest.inputs.push_back(*corpus_dir / "index.json");
        corpus = read_corpus_cache(*corpus_dir, model.model.input_size);
    } else {
        throw Error(ErrorKind::BadSpec, "pass --run or --corpus");
    }
    const EvaluationReport report = evaluate(model.model, model.student, corpus);
    nlohmann::json j = to_json(report, corpus.family_names);
    j["checkpoint"] = ckpt.string();
    j["step"] = model.step;
    j["split"] = which;
    const fs::path dest = out ? *out : (run ? *run / ("eval_" + which + ".json") : fs::path("eval.json"));
    write_text(dest, j.dump(2) + "\n");
    manifest.outputs.push_back(dest);
    if (run) manifest.write(*run / ("manifest_eval_" + which + ".json"));
    std::cout << "accuracy " << report.accuracy << " (" << report.correct << "/" << report.count << ")\n";
    return kExitOk;
}

int cmd_embed(const std::optional<fs::path>& run, const std::optional<fs::path>& checkpoint,
              const std::optional<fs::path>& corpus_dir, const std::string& which, const std::optional<fs::path>& out,
              RunManifest& manifest) {
    const fs::path ckpt = resolve_checkpoint(checkpoint, run);
    manifest.inputs.push_back(ckpt);
    const StudentCheckpoint model = load_student(ckpt);
    LabeledCorpus corpus;
    if (run) {
        corpus = run_split(*run, which, corpus_dir, model.model.input_size, manifest.inputs);
    } else if (corpus_dir) {
        manifest.inputs.push_back(*corpus_dir / "index.json");
        corpus = read_corpus_cache(*corpus_dir, model.model.input_size);
    } else {
        throw Error(ErrorKind::BadSpec, "pass --run or --corpus");
    }
    const EmbeddingTable table = export_embeddings(model.model, model.student, corpus);
    const fs::path dest = out ? *out : (run ? *run / ("embeddings_" + which + ".csv") : fs::path("embeddings.csv"));
    write_embedding_csv(table, dest);
    manifest.outputs.push_back(dest);

    fs::path conf = dest;
    conf.replace_extension(".confidence.csv");
    std::ostringstream c;
    c << "source_id,family_id,max_prob\n";
    for (std::size_t i = 0; i < table.rows(); ++i) {
        c << csv_field(table.source_ids[i]) << ',' << table.family_ids[i] << ',' << table.max_prob[i] << '\n';
    }
    write_text(conf, c.str());
    manifest.outputs.push_back(conf);
    if (run) manifest.write(*run / ("manifest_embed_" + which + ".json"));
    std::cout << "wrote " << table.rows() << " x " << table.dim << " embeddings to " << dest.string() << "\n";
    try {
        std::cout << "silhouette " << cluster_quality(table) << "\n";
    } catch (const Error&) {
        // Unlabeled or single-family tables have no silhouette.
    }
    return kExitOk;
}

int cmd_project(const fs::path& embeddings, const std::string& method, const std::string& command,
                const std::optional<fs::path>& out, const std::optional<fs::path>& svg,
                const std::optional<fs::path>& run, RunManifest& manifest) {
    manifest.inputs.push_back(embeddings);
    const EmbeddingTable table = read_embedding_csv(embeddings);
    const Projection2D projection =
        project_2d(table, method == "pca" ? ProjectionMethod::pca : ProjectionMethod::external, command);
    fs::path dest = out ? *out : embeddings;
    if (!out) dest.replace_filename("projection_" + method + ".csv");
    write_projection_csv(projection, dest);
    manifest.outputs.push_back(dest);

    std::vector<std::string> names;
    if (run) {
        const auto split = read_json(*run / "split.json");
        try {
            names = read_json(fs::path(split.at("corpus").get<std::string>()) / "index.json")
                        .at("family_names")
                        .get<std::vector<std::string>>();
        } catch (const Error&) {
        }
    }
    fs::path plot = svg ? *svg : dest;
    if (!svg) plot.replace_extension(".svg");
    write_text(plot, scatter_svg(projection, names, "Embeddings (" + method + ")"));
    manifest.outputs.push_back(plot);
    manifest.write(dest.parent_path() / ("manifest_project_" + method + ".json"));
    std::cout << "projected " << projection.rows() << " rows to " << dest.string() << " and " << plot.string() << "\n";
    return kExitOk;
}

int cmd_detect(const fs::path& reference_csv, const std::vector<std::string>& queries,
               const std::optional<fs::path>& query_embeddings, const std::optional<fs::path>& run,
               const std::optional<fs::path>& checkpoint, double quantile, const fs::path& out,
               RunManifest& manifest) {
    manifest.inputs.push_back(reference_csv);
    const EmbeddingTable reference = read_embedding_csv(reference_csv);
    const NoveltyReference ref = build_reference(reference, quantile);

    EmbeddingTable query_table;
    std::vector<std::optional<double>> confidence;
    if (query_embeddings) {
        manifest.inputs.push_back(*query_embeddings);
        query_table = read_embedding_csv(*query_embeddings);
        confidence.assign(query_table.rows(), std::nullopt);
    }
    if (!queries.empty()) {
        const fs::path ckpt = resolve_checkpoint(checkpoint, run);
        manifest.inputs.push_back(ckpt);
        const StudentCheckpoint model = load_student(ckpt);
        LabeledCorpus corpus;
        for (const auto& q : queries) {
            manifest.inputs.push_back(q);
            corpus.samples.push_back({binary_to_image(read_byte_stream(q), model.model.input_size), -1, q});
        }
        const EmbeddingTable t = export_embeddings(model.model, model.student, corpus);
        for (std::size_t i = 0; i < t.rows(); ++i) {
            query_table.append(t.source_ids[i], -1, t.row(i));
            confidence.push_back(t.max_prob[i]);
        }
    }
    if (query_table.rows() == 0) throw Error(ErrorKind::BadSpec, "no queries: give files or --query-embeddings");

    std::ostringstream csv;
    csv << "source_id,nearest_family,distance,threshold,novel,max_prob\n";
    std::size_t novel = 0;
    for (std::size_t i = 0; i < query_table.rows(); ++i) {
        const NoveltyResult r = novelty_score(ref, query_table.row(i));
        const auto f = static_cast<std::size_t>(
            std::find(ref.families.begin(), ref.families.end(), r.nearest_family) - ref.families.begin());
        csv << csv_field(query_table.source_ids[i]) << ',' << r.nearest_family << ',' << r.distance << ','
            << ref.thresholds[f] << ',' << (r.novel ? "true" : "false") << ',';
        if (confidence[i]) csv << *confidence[i];
        csv << '\n';
        novel += r.novel ? 1 : 0;
    }
    write_text(out, csv.str());
    manifest.outputs.push_back(out);
    fs::path mpath = out;
    mpath.replace_filename("manifest_detect.json");
    manifest.write(mpath);
    std::cout << novel << " of " << query_table.rows() << " queries flagged novel; report in " << out.string() << "\n";
    return kExitOk;
}

int cmd_plot_loss(const std::vector<std::string>& runs, const std::vector<std::string>& metrics, const fs::path& out,
                  RunManifest& manifest) {
    std::vector<LossSeries> series;
    for (const auto& r : runs) {
        const fs::path run(r);
        const auto log = run / "metrics.jsonl";
        manifest.inputs.push_back(log);
        const auto records = read_metrics_log(log);
        std::string mode = "composite";
        try {
            mode = read_json(run / "config.json").at("mode").get<std::string>();
        } catch (const Error&) {
        }
        const std::string name = run.filename().empty() ? run.parent_path().filename().string() : run.filename().string();
        for (const auto& m : metrics) {
            const std::string key = m == "auto" ? (mode == "ce_only" ? "ce" : "composite") : m;
            LossSeries s;
            s.label = name + " (" + mode + ") " + key;
            for (const auto& rec : records) {
                s.steps.push_back(static_cast<double>(rec.step));
                s.values.push_back(key == "ce" ? rec.ce : key == "d2v" ? rec.d2v : rec.composite);
            }
            series.push_back(std::move(s));
        }
    }
    write_text(out, loss_overlay_svg(series, "Training loss"));
    manifest.outputs.push_back(out);
    fs::path mpath = out;
    mpath.replace_filename("manifest_plot_loss.json");
    manifest.write(mpath);
    std::cout << "wrote " << series.size() << " curves to " << out.string() << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"Malware family classification from byte images, with a masked teacher-student regularizer"};
    app.require_subcommand(1);
    RunManifest manifest;
    manifest.argv = args;

    // convert
    auto* convert = app.add_subcommand("convert", "Turn binaries into cached grayscale images");
    std::vector<std::string> convert_inputs;
    std::optional<fs::path> convert_manifest, convert_root;
    fs::path convert_out;
    std::size_t convert_side = kImageSide;
    bool convert_png = false;
    convert->add_option("inputs", convert_inputs, "Binary files (unlabeled)");
    convert->add_option("--manifest", convert_manifest, "CSV with header path,family");
    convert->add_option("--root", convert_root, "Directory manifest paths are relative to (default: its folder)");
    convert->add_option("--out", convert_out, "Output corpus directory")->required();
    convert->add_option("--side", convert_side, "Image side in pixels")->capture_default_str();
    convert->add_flag("--png", convert_png, "Also write PNG previews");

    // synth
    auto* synth = app.add_subcommand("synth", "Generate the synthetic texture corpus");
    std::size_t synth_families = 5, synth_per_family = 200, synth_side = 100;
    std::uint64_t synth_seed = 1;
    fs::path synth_out;
    bool synth_png = false;
    synth->add_option("--families", synth_families, "Number of families")->capture_default_str();
    synth->add_option("--per-family", synth_per_family, "Samples per family")->capture_default_str();
    synth->add_option("--seed", synth_seed, "Generator seed")->capture_default_str();
    synth->add_option("--side", synth_side, "Image side in pixels")->capture_default_str();
    synth->add_option("--out", synth_out, "Output corpus directory")->required();
    synth->add_flag("--png", synth_png, "Also write PNG previews");

    // train
    auto* train_cmd = app.add_subcommand("train", "Train a model; writes a run directory named by config hash and seed");
    std::optional<fs::path> train_config;
    fs::path train_corpus, train_out = "runs";
    bool train_resume = false;
    TrainFlags flags;
    train_cmd->add_option("--config", train_config, "JSON file with TrainConfig keys; flags override it");
    train_cmd->add_option("--corpus", train_corpus, "Corpus directory from convert or synth")->required();
    train_cmd->add_option("--out", train_out, "Parent of run directories")->capture_default_str();
    train_cmd->add_flag("--resume", train_resume, "Continue from the run's latest checkpoint");
    flags.add_to(*train_cmd);
    train_cmd->footer(
        "Loss = cross-entropy + lambda * smooth-L1(teacher(x), student(masked x)); the teacher is an "
        "exponential moving average of the student. Defaults: beta 0.5, lambda 1, dropout 0.2, tau 0.999, "
        "Adam with learning rate 1e-4.");

    // eval / embed share their inputs
    std::optional<fs::path> run, checkpoint, corpus_dir, out;
    std::string which = "test";
    auto* eval = app.add_subcommand("eval", "Accuracy, per-family accuracy and confusion of a checkpoint");
    auto* embed = app.add_subcommand("embed", "Export encoder embeddings as CSV");
    for (auto* sub : {eval, embed}) {
        sub->add_option("--run", run, "Run directory");
        sub->add_option("--checkpoint", checkpoint, "Checkpoint (default: latest in the run)");
        sub->add_option("--corpus", corpus_dir, "Corpus directory (default: the run's)");
        sub->add_option("--split", which, "test, train or all")
            ->check(CLI::IsMember({"test", "train", "all"}))
            ->capture_default_str();
        sub->add_option("--out", out, "Output file");
    }

    // project
    auto* project = app.add_subcommand("project", "2-D projection of an embedding CSV plus an SVG scatter");
    fs::path project_in;
    std::string project_method = "pca", project_command;
    std::optional<fs::path> project_svg;
    project->add_option("embeddings", project_in, "Embedding CSV")->required();
    project->add_option("--method", project_method, "pca or external")
        ->check(CLI::IsMember({"pca", "external"}))
        ->capture_default_str();
    project->add_option("--command", project_command, "External projector: CSV on stdin, projection CSV on stdout");
    project->add_option("--out", out, "Projection CSV");
    project->add_option("--svg", project_svg, "Scatter plot");
    project->add_option("--run", run, "Run directory, for family names in the legend");

    // detect
    auto* detect = app.add_subcommand("detect", "Flag queries far from every known family");
    fs::path detect_reference, detect_out = "novelty.csv";
    std::vector<std::string> detect_queries;
    std::optional<fs::path> detect_query_embeddings;
    double detect_quantile = 0.95;
    detect->add_option("queries", detect_queries, "Binary files to score");
    detect->add_option("--reference", detect_reference, "Embedding CSV of known families")->required();
    detect->add_option("--query-embeddings", detect_query_embeddings, "Embedding CSV of queries");
    detect->add_option("--run", run, "Run directory holding the model");
    detect->add_option("--checkpoint", checkpoint, "Checkpoint (default: latest in the run)");
    detect->add_option("--quantile", detect_quantile, "Per-family distance quantile used as threshold")
        ->capture_default_str();
    detect->add_option("--out", detect_out, "Report CSV")->capture_default_str();

    // plot-loss
    auto* plot = app.add_subcommand("plot-loss", "SVG overlay of training-loss curves of several runs");
    std::vector<std::string> plot_runs;
    std::vector<std::string> plot_metrics{"auto"};
    fs::path plot_out = "loss.svg";
    plot->add_option("runs", plot_runs, "Run directories")->required();
    plot->add_option("--metric", plot_metrics, "auto (the optimized loss), ce, d2v or composite")
        ->check(CLI::IsMember({"auto", "ce", "d2v", "composite"}))
        ->capture_default_str();
    plot->add_option("--out", plot_out, "Output SVG")->capture_default_str();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (*convert) {
            manifest.command = "convert";
            return cmd_convert(convert_inputs, convert_manifest, convert_root, convert_out, convert_side, convert_png,
                               manifest);
        }
        if (*synth) {
            manifest.command = "synth";
            return cmd_synth(synth_families, synth_per_family, synth_seed, synth_side, synth_out, synth_png, manifest);
        }
        if (*train_cmd) {
            manifest.command = "train";
            return cmd_train(train_config, train_corpus, train_out, flags, train_resume, manifest);
        }
        if (*eval) {
            manifest.command = "eval";
            return cmd_eval(run, checkpoint, corpus_dir, which, out, manifest);
        }
        if (*embed) {
            manifest.command = "embed";
            return cmd_embed(run, checkpoint, corpus_dir, which, out, manifest);
        }
        if (*project) {
            manifest.command = "project";
            return cmd_project(project_in, project_method, project_command, out, project_svg, run, manifest);
        }
        if (*detect) {
            manifest.command = "detect";
            return cmd_detect(detect_reference, detect_queries, detect_query_embeddings, run, checkpoint,
                              detect_quantile, detect_out, manifest);
        }
        if (*plot) {
            manifest.command = "plot-loss";
            return cmd_plot_loss(plot_runs, plot_metrics, plot_out, manifest);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.is_validation() ? kExitValidation : kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitValidation;
}

}  // namespace malimg
