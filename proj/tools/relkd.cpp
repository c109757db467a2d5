// relkd command-line tool: vocabulary, toy teacher pretraining, distillation,
// checkpoint selection, benchmarking and result analysis.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "manifest.hpp"
#include "relkd/analysis/analysis.hpp"
#include "relkd/bench/harness.hpp"
#include "relkd/trainer/run.hpp"

namespace fs = std::filesystem;
using namespace relkd;
using relkd::cli::RunManifest;

namespace {

int run_command(const std::string& name, const fs::path& manifest_path, const std::function<void(RunManifest&)>& body) {
    std::optional<RunManifest> m;
    try {
        m.emplace(name, manifest_path);
        body(*m);
        m->finish(true);
        return 0;
    } catch (const std::exception& e) {
        std::cerr << "relkd " << name << ": error: " << e.what() << '\n';
        if (m) {
            try {
                m->finish(false, e.what());
            } catch (const std::exception& inner) {
                std::cerr << "relkd " << name << ": could not finalize manifest: " << inner.what() << '\n';
            }
        }
        return 1;
    }
}

std::vector<std::string> read_corpus(const fs::path& p) {
    auto lines = textdata::read_lines(p);
    if (lines.empty()) throw ContractError("corpus '" + p.string() + "' has no non-empty lines");
    return lines;
}

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open '" + p.string() + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(p.string() + ": " + e.what());
    }
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        unsigned long v = 0;
        try {
            v = std::stoul(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != item.size()) throw ConfigError("--sweep: '" + item + "' is not a batch size");
        out.push_back(v);
    }
    return out;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) throw IoError("cannot write '" + p.string() + "'");
}

std::string host_cpu() {
    std::ifstream in("/proc/cpuinfo");
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("model name", 0) == 0) return line.substr(line.find(':') + 2);
    }
    return "unknown";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Relation distillation toolkit for small multilingual encoders"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(RELKD_VERSION));
    std::function<int()> action;

    // build-vocab
    struct {
        std::string corpus, out;
        std::size_t size = 30000;
        bool lowercase = false;
    } bv;
    auto* c_bv = app.add_subcommand("build-vocab", "Build a frequency-ranked vocabulary from a corpus");
    c_bv->add_option("--corpus", bv.corpus, "Training corpus, one text per line")->required();
    c_bv->add_option("--out", bv.out, "Vocabulary file to write")->required();
    c_bv->add_option("--size", bv.size, "Maximum entries including the 4 special tokens")->capture_default_str();
    c_bv->add_flag("--lowercase", bv.lowercase, "Lowercase text before counting");
    c_bv->callback([&] {
        action = [&] {
            return run_command("build-vocab", bv.out + ".manifest.json", [&](RunManifest& m) {
                m.config() = {{"corpus", bv.corpus}, {"out", bv.out}, {"size", bv.size}, {"lowercase", bv.lowercase}};
                m.add_input("corpus", bv.corpus);
                m.begin();
                auto vocab = textdata::build_vocab(fs::path(bv.corpus), bv.size, bv.lowercase);
                textdata::save_vocab(vocab, bv.out);
                std::cout << "wrote " << bv.out << " (" << vocab.size() << " entries)\n";
            });
        };
    });

    // pretrain-teacher
    struct {
        std::string config, train_config, corpus, vocab, out;
        std::optional<std::size_t> steps;
        std::optional<std::uint64_t> seed;
        double mask_prob = 0.15;
        bool lowercase = false;
    } pt;
    auto* c_pt = app.add_subcommand("pretrain-teacher", "Train a toy teacher with masked language modeling");
    c_pt->add_option("--config", pt.config, "Model config file")->required();
    c_pt->add_option("--train-config", pt.train_config, "Optimizer and schedule config file");
    c_pt->add_option("--corpus", pt.corpus, "Training corpus")->required();
    c_pt->add_option("--vocab", pt.vocab, "Vocabulary file")->required();
    c_pt->add_option("--steps", pt.steps, "Override total_steps");
    c_pt->add_option("--seed", pt.seed, "Override the config seed");
    c_pt->add_option("--mask-prob", pt.mask_prob, "Fraction of tokens masked")->capture_default_str();
    c_pt->add_flag("--lowercase", pt.lowercase, "The vocabulary was built with --lowercase");
    c_pt->add_option("--out", pt.out, "Output directory")->required();
    c_pt->callback([&] {
        action = [&] {
            return run_command("pretrain-teacher", fs::path(pt.out) / "manifest.json", [&](RunManifest& m) {
                m.add_input("model_config", pt.config);
                if (!pt.train_config.empty()) m.add_input("train_config", pt.train_config);
                m.add_input("corpus", pt.corpus);
                m.add_input("vocab", pt.vocab);
                const auto vocab = textdata::load_vocab(pt.vocab, pt.lowercase);
                const auto model = encoder::model_config_from_kv(util::KvConfig::parse_file(pt.config), vocab.size());
                auto kv = pt.train_config.empty() ? util::KvConfig() : util::KvConfig::parse_file(pt.train_config);
                if (pt.steps) kv.set("total_steps", std::to_string(*pt.steps));
                if (pt.seed) kv.set("seed", std::to_string(*pt.seed));
                const auto train = trainer::train_config_from_kv(kv);
                m.config() = {{"model", encoder::to_json(model)}, {"train", trainer::to_json(train)},
                              {"mask_prob", pt.mask_prob},       {"lowercase", pt.lowercase},
                              {"out", pt.out}};
                m.begin();
                const auto corpus = read_corpus(pt.corpus);
                auto r = trainer::pretrain_teacher(model, corpus, vocab, train, pt.mask_prob, pt.out);
                if (r.losses.empty()) throw NumericError("no batch contained a masked token");
                std::printf("mlm loss %.6g -> %.6g over %zu steps; final checkpoint %s\n", r.losses.front(),
                            r.losses.back(), train.total_steps, r.records.back().path.c_str());
            });
        };
    });

    // distill
    struct {
        std::string teacher, student_config, relation_config, train_config, corpus, vocab, out;
        std::optional<std::uint64_t> seed;
        std::size_t log_every = 0;
        bool lowercase = false;
    } ds;
    auto* c_ds = app.add_subcommand("distill", "Distill a student from a frozen teacher checkpoint");
    c_ds->add_option("--teacher", ds.teacher, "Teacher checkpoint")->required();
    c_ds->add_option("--student-config", ds.student_config, "Student model config file")->required();
    c_ds->add_option("--relation-config", ds.relation_config, "Relation config file")->required();
    c_ds->add_option("--train-config", ds.train_config, "Optimizer and schedule config file")->required();
    c_ds->add_option("--corpus", ds.corpus, "Training corpus")->required();
    c_ds->add_option("--vocab", ds.vocab, "Vocabulary file")->required();
    c_ds->add_option("--seed", ds.seed, "Override the train config seed");
    c_ds->add_option("--log-every", ds.log_every, "Print the loss every N steps (0: never)");
    c_ds->add_flag("--lowercase", ds.lowercase, "The vocabulary was built with --lowercase");
    c_ds->add_option("--out", ds.out, "Run directory")->required();
    c_ds->callback([&] {
        action = [&] {
            return run_command("distill", fs::path(ds.out) / "manifest.json", [&](RunManifest& m) {
                m.add_input("teacher", ds.teacher);
                m.add_input("student_config", ds.student_config);
                m.add_input("relation_config", ds.relation_config);
                m.add_input("train_config", ds.train_config);
                m.add_input("corpus", ds.corpus);
                m.add_input("vocab", ds.vocab);
                const auto vocab = textdata::load_vocab(ds.vocab, ds.lowercase);
                const auto student =
                    encoder::model_config_from_kv(util::KvConfig::parse_file(ds.student_config), vocab.size());
                const auto rel = distill::relation_config_from_kv(util::KvConfig::parse_file(ds.relation_config));
                auto kv = util::KvConfig::parse_file(ds.train_config);
                if (ds.seed) kv.set("seed", std::to_string(*ds.seed));
                const auto train = trainer::train_config_from_kv(kv);
                const auto teacher = encoder::load_checkpoint(ds.teacher);
                rel.check_compatible(teacher.config, student);
                m.config() = {{"student", encoder::to_json(student)}, {"relation", distill::to_json(rel)},
                              {"train", trainer::to_json(train)},     {"teacher", ds.teacher},
                              {"lowercase", ds.lowercase},            {"out", ds.out}};
                m.begin();
                const auto corpus = read_corpus(ds.corpus);
                trainer::DistillRunOptions opt;
                opt.out_dir = ds.out;
                opt.teacher_path = ds.teacher;
                if (ds.log_every > 0) {
                    opt.on_step = [&](std::size_t step, double loss) {
                        if (step % ds.log_every == 0) std::printf("step %zu loss %.6g\n", step, loss);
                    };
                }
                auto r = trainer::distill_run(teacher.weights, student, rel, corpus, vocab, train, opt);
                std::printf("distill loss %.6g -> %.6g; %zu checkpoints in %s\n", r.losses.front(), r.losses.back(),
                            r.records.size(), ds.out.c_str());
            });
        };
    });

    // select-checkpoint
    struct {
        std::string run_dir, validation, teacher, vocab, out;
        std::optional<std::size_t> batch_size;
        bool lowercase = false;
    } sc;
    auto* c_sc = app.add_subcommand("select-checkpoint", "Pick the checkpoint with the lowest held-out distill loss");
    c_sc->add_option("--run-dir", sc.run_dir, "Directory written by distill")->required();
    c_sc->add_option("--validation-corpus", sc.validation, "Held-out corpus")->required();
    c_sc->add_option("--teacher", sc.teacher, "Teacher checkpoint used for the run")->required();
    c_sc->add_option("--vocab", sc.vocab, "Vocabulary file (default: the one recorded in the run manifest)");
    c_sc->add_option("--batch-size", sc.batch_size, "Validation batch size (default: the run's batch size)");
    c_sc->add_flag("--lowercase", sc.lowercase, "The vocabulary was built with --lowercase");
    c_sc->add_option("--out", sc.out, "Output directory for best.json")->required();
    c_sc->callback([&] {
        action = [&] {
            return run_command("select-checkpoint", fs::path(sc.out) / "manifest.json", [&](RunManifest& m) {
                const fs::path run_dir = sc.run_dir;
                const auto run = read_json(run_dir / "run.json");
                std::string vocab_path = sc.vocab;
                std::optional<fs::path> train_corpus;
                if (fs::exists(run_dir / "manifest.json")) {
                    for (const auto& in : read_json(run_dir / "manifest.json").value("inputs", nlohmann::json::array())) {
                        if (in.value("role", "") == "corpus") train_corpus = in.value("path", "");
                        if (in.value("role", "") == "vocab" && vocab_path.empty()) vocab_path = in.value("path", "");
                    }
                }
                if (vocab_path.empty()) throw ConfigError("no --vocab given and none recorded in the run manifest");
                if (train_corpus && fs::exists(*train_corpus) && fs::equivalent(*train_corpus, sc.validation)) {
                    std::cerr << "relkd select-checkpoint: warning: validation corpus " << sc.validation
                              << " is the training corpus; selection will favor overfit checkpoints\n";
                }
                m.add_input("teacher", sc.teacher);
                m.add_input("validation_corpus", sc.validation);
                m.add_input("vocab", vocab_path);
                distill::RelationConfig rel;
                try {
                    const auto& r = run.at("relation");
                    rel.teacher_layer = r.at("teacher_layer").get<std::size_t>();
                    rel.relation_heads = r.at("relation_heads").get<std::size_t>();
                    rel.w_qq = r.at("w_qq").get<double>();
                    rel.w_kk = r.at("w_kk").get<double>();
                    rel.w_vv = r.at("w_vv").get<double>();
                } catch (const nlohmann::json::exception& e) {
                    throw FormatError((run_dir / "run.json").string() + ": bad relation block: " + e.what());
                }
                const std::size_t seq_len = run.at("train").at("seq_len").get<std::size_t>();
                const std::size_t batch = sc.batch_size.value_or(run.at("train").at("batch_size").get<std::size_t>());
                m.config() = {{"run_dir", sc.run_dir},  {"relation", distill::to_json(rel)},
                              {"seq_len", seq_len},     {"batch_size", batch},
                              {"vocab", vocab_path},    {"lowercase", sc.lowercase},
                              {"out", sc.out}};
                m.begin();
                const auto records = trainer::list_checkpoints(run_dir);
                if (records.empty()) throw IoError("run directory '" + sc.run_dir + "' has no checkpoints");
                const auto vocab = textdata::load_vocab(vocab_path, sc.lowercase);
                const auto teacher = encoder::load_checkpoint(sc.teacher);
                const auto batches = textdata::fixed_batches(read_corpus(sc.validation), vocab, batch, seq_len);
                const auto best = trainer::select_checkpoint(records, teacher.weights, rel, batches);
                fs::create_directories(sc.out);
                trainer::write_json(fs::path(sc.out) / "best.json",
                                    {{"path", best.path.string()}, {"step", best.step}, {"val_loss", *best.val_loss}});
                std::printf("best checkpoint %s (step %zu, val_loss %.6g)\n", best.path.c_str(), best.step,
                            *best.val_loss);
            });
        };
    });

    // bench
    struct {
        std::string model, corpus, vocab, sweep = "1,2,4,8,16,32", backend = "none", out, id;
        bench::BenchConfig cfg;
        bool lowercase = false;
    } bn;
    auto* c_bn = app.add_subcommand("bench", "Measure latency, throughput and energy of a checkpoint");
    c_bn->add_option("--model", bn.model, "Model checkpoint")->required();
    c_bn->add_option("--corpus", bn.corpus, "Corpus supplying benchmark inputs")->required();
    c_bn->add_option("--vocab", bn.vocab, "Vocabulary file")->required();
    c_bn->add_option("--sweep", bn.sweep, "Comma-separated increasing batch sizes")->capture_default_str();
    c_bn->add_option("--power-backend", bn.backend, std::string("Power source: ") + bench::kBackendHelp)
        ->capture_default_str();
    c_bn->add_option("--warmup", bn.cfg.warmup_batches, "Untimed batches before each window")->capture_default_str();
    c_bn->add_option("--measured", bn.cfg.measured_batches, "Timed batches per window")->capture_default_str();
    c_bn->add_option("--seq-len", bn.cfg.seq_len, "Tokens per input row")->capture_default_str();
    c_bn->add_option("--poll-hz", bn.cfg.power_poll_hz, "Power polling rate")->capture_default_str();
    c_bn->add_option("--seed", bn.cfg.seed, "Input sampling seed")->capture_default_str();
    c_bn->add_option("--id", bn.id, "Model id in reports (default: checkpoint file stem)");
    c_bn->add_flag("--lowercase", bn.lowercase, "The vocabulary was built with --lowercase");
    c_bn->add_option("--out", bn.out, "Output directory")->required();
    c_bn->callback([&] {
        action = [&] {
            return run_command("bench", fs::path(bn.out) / "manifest.json", [&](RunManifest& m) {
                bn.cfg.sweep_sizes = parse_sizes(bn.sweep);
                bn.cfg.validate();
                bench::SteadyClock clock;
                auto sampler = bench::make_sampler(bn.backend, clock);
                m.add_input("model", bn.model);
                m.add_input("corpus", bn.corpus);
                m.add_input("vocab", bn.vocab);
                if (bn.backend.rfind("trace:", 0) == 0) m.add_input("power_trace", bn.backend.substr(6));
                const std::string id = bn.id.empty() ? fs::path(bn.model).stem().string() : bn.id;
                auto ck = encoder::load_checkpoint(bn.model);
                if (bn.cfg.seq_len > ck.config.max_seq_len) {
                    throw ConfigError("--seq-len " + std::to_string(bn.cfg.seq_len) + " exceeds the model's max_seq_len " +
                                      std::to_string(ck.config.max_seq_len));
                }
                m.config() = {{"id", id},
                              {"sweep", bn.cfg.sweep_sizes},
                              {"power_backend", bn.backend},
                              {"warmup_batches", bn.cfg.warmup_batches},
                              {"measured_batches", bn.cfg.measured_batches},
                              {"latency_batch_size", bn.cfg.latency_batch_size},
                              {"seq_len", bn.cfg.seq_len},
                              {"power_poll_hz", bn.cfg.power_poll_hz},
                              {"seed", bn.cfg.seed},
                              {"lowercase", bn.lowercase},
                              {"out", bn.out},
                              {"environment",
                               {{"cpu", host_cpu()}, {"hardware_threads", std::thread::hardware_concurrency()}}}};
                m.begin();
                const auto vocab = textdata::load_vocab(bn.vocab, bn.lowercase);
                if (vocab.size() != ck.config.vocab_size) throw ConfigError("vocab size does not match the model");
                bench::BenchData data(read_corpus(bn.corpus), vocab, bn.cfg.seq_len, bn.cfg.seed);
                bench::EncoderBenchModel model(std::move(ck.weights), id);
                const auto rep = bench::run_bench(model, data, bn.cfg, clock, sampler.get());
                fs::create_directories(bn.out);
                trainer::write_json(fs::path(bn.out) / "bench.json", bench::to_json(rep));
                write_text(fs::path(bn.out) / "bench.csv", bench::report_csv(rep));
                for (const auto& row : rep.rows) {
                    if (!row.ok) std::cerr << "relkd bench: batch " << row.batch_size << " failed: " << row.error << '\n';
                }
                std::printf("latency bs1 %.4g ms; peak throughput %.6g samples/s at batch %zu\n",
                            rep.latency_bs1.mean_ms, rep.peak_throughput_sps, rep.peak_throughput_batch);
                if (rep.optimal_j_per_sample) {
                    std::printf("optimal energy %.6g J/sample at batch %zu\n", *rep.optimal_j_per_sample,
                                *rep.optimal_j_batch);
                }
            });
        };
    });

    // analyze
    struct {
        std::string scores, efficiency, baseline, out;
        std::vector<std::string> curves;
    } an;
    auto* c_an = app.add_subcommand("analyze", "Macro-averages, improvement factors and efficiency frontiers");
    c_an->add_option("--scores", an.scores, "CSV with columns model,lang,score")->required();
    c_an->add_option("--efficiency", an.efficiency,
                     "CSV with columns model,latency_bs1_ms,peak_throughput_sps,optimal_j_per_sample")
        ->required();
    c_an->add_option("--baseline", an.baseline, "Model id whose factors are 1.0")->required();
    c_an->add_option("--curve", an.curves, "bench.csv files for the per-batch energy/throughput figure");
    c_an->add_option("--out", an.out, "Output directory")->required();
    c_an->callback([&] {
        action = [&] {
            return run_command("analyze", fs::path(an.out) / "manifest.json", [&](RunManifest& m) {
                m.config() = {{"baseline", an.baseline}, {"curves", an.curves}, {"out", an.out}};
                m.add_input("scores", an.scores);
                m.add_input("efficiency", an.efficiency);
                for (const auto& c : an.curves) m.add_input("curve", c);
                m.begin();
                std::vector<analysis::ModelRecord> recs;
                analysis::ingest_efficiency(recs, an.efficiency);
                analysis::ingest_scores(recs, an.scores);
                for (const auto& c : an.curves) analysis::ingest_bench_curve(recs, c);
                const auto summary = analysis::summarize(recs, an.baseline);
                const auto figs = analysis::emit_figures(recs, an.out);
                analysis::write_summary(summary, an.out);
                for (const auto& w : figs.warnings) std::cerr << "relkd analyze: warning: " << w << '\n';
                std::cout << analysis::summary_csv(summary);
            });
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }
    return action ? action() : 1;
}
