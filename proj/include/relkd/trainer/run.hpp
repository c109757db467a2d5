#pragma once

// Training loops (relation distillation and MLM teacher pretraining),
// validation, and checkpoint selection.

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "relkd/distill/relations.hpp"
#include "relkd/encoder/checkpoint.hpp"
#include "relkd/encoder/mlm.hpp"
#include "relkd/textdata/batches.hpp"
#include "relkd/trainer/optim.hpp"

namespace relkd::trainer {

namespace fs = std::filesystem;

struct CheckpointRecord {
    fs::path path;
    std::size_t step = 0;
    double train_loss = 0.0;
    std::optional<double> val_loss;
};

struct RunResult {
    std::vector<CheckpointRecord> records;
    std::vector<double> losses;  // training loss per step
};

inline std::string checkpoint_name(std::size_t step) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "ckpt_%08zu.ckpt", step);
    return buf;
}

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

/// Writes JSON with a trailing newline; throws IoError on failure.
inline void write_json(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out << j.dump(2) << '\n';
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

/// Aborted run: carries the last checkpoint that was written before the failure.
class RunAborted : public NumericError {
public:
    RunAborted(const std::string& what, std::optional<CheckpointRecord> last_good)
        : NumericError(what), last_good_(std::move(last_good)) {}
    const std::optional<CheckpointRecord>& last_good() const { return last_good_; }

private:
    std::optional<CheckpointRecord> last_good_;
};

/// Number of valid (non-PAD) positions, the weight of a batch in a validation mean.
inline std::size_t valid_positions(const textdata::TokenBatch& b) {
    std::size_t n = 0;
    for (auto m : b.mask) n += m ? 1 : 0;
    return n;
}

/// Mean distillation loss over fixed batches, each weighted by its valid positions
/// so the result equals the per-row mean over the whole set. Dropout off, no gradients.
inline double evaluate_distill_loss(const encoder::EncoderWeights<float>& teacher,
                                    const encoder::EncoderWeights<float>& student, const distill::RelationConfig& rel,
                                    const std::vector<textdata::TokenBatch>& batches) {
    if (batches.empty()) throw ContractError("evaluate_distill_loss: no validation batches");
    numkit::NoGradGuard guard;
    double total = 0.0;
    double weight = 0.0;
    for (const auto& b : batches) {
        const auto w = static_cast<double>(valid_positions(b));
        const auto l = distill::batch_distill_loss(teacher, student, rel, textdata::trim_padding(b));
        total += w * static_cast<double>(l.total.item());
        weight += w;
    }
    return total / weight;
}

struct DistillRunOptions {
    fs::path out_dir;
    std::string teacher_path;                     // echoed to run.json
    std::function<void(std::size_t, double)> on_step;  // optional progress hook
};

/// Distills a fresh student from a frozen teacher. Writes run.json, loss.csv and
/// checkpoints every checkpoint_every steps plus the final step.
inline RunResult distill_run(const encoder::EncoderWeights<float>& teacher, const encoder::ModelConfig& student_cfg,
                             const distill::RelationConfig& rel, const std::vector<std::string>& corpus,
                             const textdata::Vocab& vocab, const TrainConfig& cfg, const DistillRunOptions& opt) {
    cfg.validate();
    rel.check_compatible(teacher.config, student_cfg);
    if (vocab.size() != student_cfg.vocab_size) {
        throw ConfigError("vocab has " + std::to_string(vocab.size()) + " entries but the student expects " +
                          std::to_string(student_cfg.vocab_size));
    }
    if (cfg.seq_len > student_cfg.max_seq_len || cfg.seq_len > teacher.config.max_seq_len) {
        throw ConfigError("seq_len " + std::to_string(cfg.seq_len) + " exceeds a model's max_seq_len");
    }
    fs::create_directories(opt.out_dir);
    write_json(opt.out_dir / "run.json", {{"kind", "distill"},
                                          {"teacher", opt.teacher_path},
                                          {"teacher_config", encoder::to_json(teacher.config)},
                                          {"student_config", encoder::to_json(student_cfg)},
                                          {"relation", distill::to_json(rel)},
                                          {"train", to_json(cfg)},
                                          {"corpus_lines", corpus.size()},
                                          {"vocab_size", vocab.size()}});

    auto student = encoder::init_model<float>(student_cfg, cfg.seed);
    student.set_requires_grad(true);
    const auto params = student.named_parameters();
    AdamState state(params);
    textdata::BatchStream stream(corpus, vocab, cfg.batch_size, cfg.seq_len, cfg.seed + 1);
    std::mt19937_64 dropout_rng(cfg.seed + 2);

    std::ofstream log(opt.out_dir / "loss.csv", std::ios::binary | std::ios::trunc);
    if (!log) throw IoError("cannot write '" + (opt.out_dir / "loss.csv").string() + "'");
    log << "step,lr,loss_total,loss_qq,loss_kk,loss_vv\n";

    RunResult result;
    for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
        const double lr = lr_at(step, cfg);
        try {
            auto batch = textdata::trim_padding(stream.next());
            for (auto& [name, t] : params) {
                auto copy = t;
                copy.zero_grad();
            }
            auto loss = distill::batch_distill_loss(teacher, student, rel, batch, true, &dropout_rng);
            numkit::backward(loss.total);
            if (cfg.clip_norm > 0) clip_grad_norm(params, cfg.clip_norm);
            adamw_step(params, state, lr, cfg);
            const double total = loss.total.item();
            result.losses.push_back(total);
            log << step << ',' << fmt(lr) << ',' << fmt(total) << ',' << fmt(loss.qq.item()) << ','
                << fmt(loss.kk.item()) << ',' << fmt(loss.vv.item()) << '\n';
            if (opt.on_step) opt.on_step(step, total);
        } catch (const NumericError& e) {
            log.flush();
            std::optional<CheckpointRecord> last;
            if (!result.records.empty()) last = result.records.back();
            throw RunAborted("distillation aborted at step " + std::to_string(step) + ": " + e.what() +
                                 (last ? "; last good checkpoint " + last->path.string() : "; no checkpoint written"),
                             last);
        }
        if (step % cfg.checkpoint_every == 0 || step == cfg.total_steps) {
            CheckpointRecord rec{opt.out_dir / checkpoint_name(step), step, result.losses.back(), std::nullopt};
            encoder::save_checkpoint(student, step, rec.path);
            result.records.push_back(rec);
            log.flush();
        }
    }
    if (!log) throw IoError("write failed for loss.csv");
    return result;
}

/// MLM pretraining for a toy teacher. Batches with nothing to predict are skipped
/// without an optimizer update. Writes run.json, mlm_loss.csv and checkpoints.
inline RunResult pretrain_teacher(const encoder::ModelConfig& model_cfg, const std::vector<std::string>& corpus,
                                  const textdata::Vocab& vocab, const TrainConfig& cfg, double mask_prob,
                                  const fs::path& out_dir) {
    cfg.validate();
    model_cfg.validate();
    if (!(mask_prob > 0 && mask_prob < 1)) throw ConfigError("mask_prob must lie in (0,1)");
    if (vocab.size() != model_cfg.vocab_size) throw ConfigError("vocab size does not match model config");
    if (cfg.seq_len > model_cfg.max_seq_len) throw ConfigError("seq_len exceeds max_seq_len");
    fs::create_directories(out_dir);
    write_json(out_dir / "run.json", {{"kind", "pretrain-teacher"},
                                      {"model_config", encoder::to_json(model_cfg)},
                                      {"train", to_json(cfg)},
                                      {"mask_prob", mask_prob},
                                      {"corpus_lines", corpus.size()}});
    auto w = encoder::init_model<float>(model_cfg, cfg.seed);
    w.set_requires_grad(true);
    const auto params = w.named_parameters();
    AdamState state(params);
    textdata::BatchStream stream(corpus, vocab, cfg.batch_size, cfg.seq_len, cfg.seed + 1);
    std::ofstream log(out_dir / "mlm_loss.csv", std::ios::binary | std::ios::trunc);
    log << "step,lr,loss\n";
    RunResult result;
    double last_loss = 0.0;
    for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
        const double lr = lr_at(step, cfg);
        auto batch = textdata::trim_padding(stream.next());
        for (auto& [name, t] : params) {
            auto copy = t;
            copy.zero_grad();
        }
        auto loss = encoder::mlm_loss(w, batch, mask_prob, cfg.seed * 1000003ULL + step, true);
        if (loss) {
            numkit::backward(*loss);
            if (cfg.clip_norm > 0) clip_grad_norm(params, cfg.clip_norm);
            adamw_step(params, state, lr, cfg);
            last_loss = loss->item();
            result.losses.push_back(last_loss);
            log << step << ',' << fmt(lr) << ',' << fmt(last_loss) << '\n';
        }
        if (step % cfg.checkpoint_every == 0 || step == cfg.total_steps) {
            CheckpointRecord rec{out_dir / checkpoint_name(step), step, last_loss, std::nullopt};
            encoder::save_checkpoint(w, step, rec.path);
            result.records.push_back(rec);
        }
    }
    return result;
}

/// Checkpoint records of a run directory, ascending by step.
inline std::vector<CheckpointRecord> list_checkpoints(const fs::path& run_dir) {
    if (!fs::is_directory(run_dir)) throw IoError("run directory '" + run_dir.string() + "' does not exist");
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(run_dir)) {
        if (e.is_regular_file() && e.path().extension() == ".ckpt") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::vector<CheckpointRecord> out;
    for (const auto& f : files) {
        CheckpointRecord r;
        r.path = f;
        r.step = encoder::load_checkpoint(f).step;
        out.push_back(r);
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.step < b.step; });
    for (std::size_t i = 1; i < out.size(); ++i) {
        if (out[i].step == out[i - 1].step) {
            throw FormatError("checkpoints " + out[i - 1].path.string() + " and " + out[i].path.string() +
                              " share step " + std::to_string(out[i].step));
        }
    }
    return out;
}

/// Argmin of the evaluator over records; equal losses resolve to the later step,
/// which makes the choice independent of record order.
inline CheckpointRecord select_checkpoint(const std::vector<CheckpointRecord>& records,
                                          const std::function<double(const CheckpointRecord&)>& evaluate) {
    if (records.empty()) throw ContractError("select_checkpoint: no checkpoint records");
    std::optional<CheckpointRecord> best;
    for (const auto& r : records) {
        CheckpointRecord scored = r;
        scored.val_loss = evaluate(r);
        if (!std::isfinite(*scored.val_loss)) throw NumericError("validation loss of " + r.path.string() + " is not finite");
        if (!best || *scored.val_loss < *best->val_loss ||
            (*scored.val_loss == *best->val_loss && scored.step > best->step)) {
            best = scored;
        }
    }
    return *best;
}

/// Validation-loss selection: every checkpoint is loaded and scored on the
/// fixed validation batches against the teacher.
inline CheckpointRecord select_checkpoint(const std::vector<CheckpointRecord>& records,
                                          const encoder::EncoderWeights<float>& teacher,
                                          const distill::RelationConfig& rel,
                                          const std::vector<textdata::TokenBatch>& validation) {
    return select_checkpoint(records, [&](const CheckpointRecord& r) {
        auto ck = encoder::load_checkpoint(r.path);
        rel.check_compatible(teacher.config, ck.config);
        return evaluate_distill_loss(teacher, ck.weights, rel, validation);
    });
}

}  // namespace relkd::trainer
