#pragma once

#include "ddet/csv.hpp"
#include "ddet/data.hpp"
#include "ddet/detector.hpp"
#include "ddet/optim.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace ddet {

struct TrainConfig {
    int epochs = 100;
    double lr_init = 0.01;
    double lr_min = 0.0001;
    int batch = 8;
    double momentum = 0.937;
    double weight_decay = 0.0005;
    uint64_t seed = 0;
};

struct TrainOptions {
    int val_every = 1;              // compute val mAP every k epochs (and on the last)
    double stop_at_train_map = 0;   // >0: stop once train-set mAP reaches this
    int stop_check_every = 10;      // how often to check the stop condition
};

struct EpochLog {
    int epoch = 0;
    double lr = 0, box = 0, obj = 0, cls = 0, total = 0;
    std::optional<double> val_map_pct;
};

struct EvalReport {
    std::string tag;
    double precision_pct = 0, recall_pct = 0, map_pct = 0;
    std::array<double, 5> class_ap_pct{};
    std::array<bool, 5> class_defined{};
    size_t param_count = 0;
    std::vector<std::string> warnings;
};

// Loads samples of one split ("train", "val", "test") or the entire
// manifest ("all") from a generated dataset directory.
std::vector<DatasetSample> load_split(const std::string& data_dir, const std::string& split);

// SGD training with cosine LR decay; writes the per-epoch CSV
// (epoch, lr, loss terms, val mAP) to log_csv_path if non-empty.
std::vector<EpochLog> train_model(Model<float>& model, const std::vector<DatasetSample>& train_set,
                                  const std::vector<DatasetSample>& val_set, const TrainConfig& cfg,
                                  const std::string& log_csv_path, const TrainOptions& opts = {});

EvalReport evaluate_model(const Model<float>& model, const std::vector<DatasetSample>& samples,
                          const DecodeParams& params = {}, const std::string& tag = "");

// Report rows in the table column order: tag, P/%, R/%, mAP@0.5/%,
// per-class AP/%, parameter count.
void write_eval_report_csv(const std::string& path, const std::vector<EvalReport>& rows);

// One-JSON-object-per-line detection records.
void write_detections_jsonl(const std::string& path, const std::vector<std::string>& image_ids,
                            const std::vector<std::vector<Detection>>& dets);

struct AblationRow {
    char label = 'A';
    bool ac_sppcspc = false, mpdiou = false, biformer = false;
    EvalReport report;
    std::string error; // non-empty if this run failed
};

// Trains and evaluates all 8 flag combinations (A: none ... H: all) with a
// shared seed and budget; writes ablation.csv plus per-run logs/checkpoints
// under out_dir. Per-run failures are recorded and the grid continues.
std::vector<AblationRow> run_ablation(const std::string& data_dir, const TrainConfig& cfg, const ModelSpec& base,
                                      const std::string& out_dir, const TrainOptions& opts = {});

// Fixed-width human-readable rendering of the ablation grid.
std::string format_ablation_table(const std::vector<AblationRow>& rows);

// Channel-mean absolute activation of the tagged layer, bilinearly
// upsampled to input size, min-max normalized, written as 8-bit gray PNG.
void write_heatmap(const Model<float>& model, const TensorF& image, const std::string& tag,
                   const std::string& out_path);

// Analytic multiply-add counts for the attention benchmark.
size_t dense_attention_macs(int c, int h, int w);
size_t bra_macs(int c, int h, int w, int S, int topk);

// Forward-timing microbenchmarks (SPPCSPC vs AC-SPPCSPC, dense attention vs
// BRA, reference vs parallel kernels); CSV with a machine-info comment
// header, one row per (block, size), median and IQR fields.
void run_bench(const std::string& out_csv, int repeats, uint64_t seed);

} // namespace ddet
