#include "ddet/harness.hpp"

#include "ddet/blocks.hpp"
#include "ddet/kernels.hpp"
#include "ddet/kernels_ref.hpp"
#include "ddet/threading.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <sys/utsname.h>

namespace ddet {

namespace {

std::string fmt(double v, int prec) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return buf;
}

// Greedy matching for pooled precision/recall: confidence-descending, each
// detection takes the best still-unmatched same-class GT with IoU >= thresh.
size_t count_true_positives(const std::vector<Detection>& dets, const std::vector<LabeledBox>& gts,
                            double iou_thresh) {
    std::vector<size_t> order(dets.size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return dets[a].confidence > dets[b].confidence; });
    std::vector<bool> used(gts.size(), false);
    size_t tp = 0;
    for (const size_t di : order) {
        int best = -1;
        double best_iou = 0;
        for (size_t gi = 0; gi < gts.size(); ++gi) {
            if (used[gi] || gts[gi].class_id != dets[di].class_id) continue;
            const double v = iou(dets[di].box, gts[gi].box);
            if (v > best_iou) {
                best_iou = v;
                best = static_cast<int>(gi);
            }
        }
        if (best >= 0 && best_iou >= iou_thresh) {
            used[static_cast<size_t>(best)] = true;
            ++tp;
        }
    }
    return tp;
}

Tensor<float> stack_images(const std::vector<DatasetSample>& samples, const std::vector<size_t>& idx, size_t start,
                           int b, int size) {
    Tensor<float> input({b, 3, size, size});
    const size_t per = static_cast<size_t>(3) * size * size;
    for (int j = 0; j < b; ++j) {
        const auto& img = samples[idx[start + j]].image;
        if (img.shape != std::vector<int>{3, size, size})
            throw std::invalid_argument("sample " + samples[idx[start + j]].image_id + " has shape " +
                                        shape_str(img.shape) + ", model expects [3," + std::to_string(size) + "," +
                                        std::to_string(size) + "]");
        std::copy(img.data.begin(), img.data.end(), input.data.begin() + static_cast<ptrdiff_t>(j * per));
    }
    return input;
}

} // namespace

std::vector<DatasetSample> load_split(const std::string& data_dir, const std::string& split) {
    namespace fs = std::filesystem;
    const auto entries = read_manifest((fs::path(data_dir) / "manifest.csv").string());
    std::map<std::string, const ManifestEntry*> by_id;
    for (const auto& e : entries) by_id[e.id] = &e;

    std::vector<std::string> ids;
    if (split == "all") {
        for (const auto& e : entries) ids.push_back(e.id);
    } else if (split == "train" || split == "val" || split == "test") {
        const auto t = read_csv((fs::path(data_dir) / ("split_" + split + ".csv")).string());
        if (t.header != std::vector<std::string>{"id"})
            throw std::runtime_error("load_split: unexpected header in split_" + split + ".csv");
        for (const auto& r : t.rows) ids.push_back(r[0]);
    } else {
        throw std::invalid_argument("load_split: split must be train, val, test or all, got '" + split + "'");
    }

    std::vector<DatasetSample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        const auto it = by_id.find(id);
        if (it == by_id.end()) throw std::runtime_error("load_split: id '" + id + "' not present in manifest");
        out.push_back(load_sample(data_dir, *it->second));
    }
    return out;
}

std::vector<EpochLog> train_model(Model<float>& model, const std::vector<DatasetSample>& train_set,
                                  const std::vector<DatasetSample>& val_set, const TrainConfig& cfg,
                                  const std::string& log_csv_path, const TrainOptions& opts) {
    if (train_set.empty()) throw std::invalid_argument("train: training set is empty");
    if (cfg.epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (cfg.batch < 1) throw std::invalid_argument("train: batch must be >= 1");
    const int size = model.spec.input_size;
    const size_t n = train_set.size();

    std::vector<TargetGrid> targets;
    targets.reserve(n);
    for (const auto& smp : train_set) targets.push_back(assign_targets(smp.labels, model.spec, model.anchors));

    SGD<float> opt{cfg.momentum, cfg.weight_decay, {}};
    std::vector<EpochLog> logs;
    for (int e = 0; e < cfg.epochs; ++e) {
        const double lr = cosine_lr(e, cfg.epochs, cfg.lr_init, cfg.lr_min);

        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), size_t{0});
        Rng rng(cfg.seed, 1000 + static_cast<uint64_t>(e)); // per-epoch shuffle stream
        for (size_t i = n - 1; i > 0; --i) {
            const size_t j = static_cast<size_t>(rng.randint(0, static_cast<long long>(i)));
            std::swap(order[i], order[j]);
        }

        double sum_box = 0, sum_obj = 0, sum_cls = 0, sum_total = 0;
        int steps = 0;
        for (size_t start = 0; start < n; start += static_cast<size_t>(cfg.batch)) {
            const int b = static_cast<int>(std::min<size_t>(cfg.batch, n - start));
            auto x = make_var<float>(stack_images(train_set, order, start, b, size), false);
            std::vector<TargetGrid> batch_targets;
            batch_targets.reserve(b);
            for (int j = 0; j < b; ++j) batch_targets.push_back(targets[order[start + j]]);

            auto head = model.forward(x, true);
            auto loss = detection_loss(head, batch_targets, model.spec, model.anchors);
            if (!std::isfinite(loss.total_v()))
                throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(e) + " step " +
                                         std::to_string(steps));
            backward(loss.total);
            opt.step(model.reg, lr);
            model.reg.zero_grad();
            sum_box += loss.box_v();
            sum_obj += loss.obj_v();
            sum_cls += loss.cls_v();
            sum_total += loss.total_v();
            ++steps;
        }

        EpochLog lg;
        lg.epoch = e;
        lg.lr = lr;
        lg.box = sum_box / steps;
        lg.obj = sum_obj / steps;
        lg.cls = sum_cls / steps;
        lg.total = sum_total / steps;
        const bool last = e == cfg.epochs - 1;
        if (!val_set.empty() && opts.val_every > 0 && ((e + 1) % opts.val_every == 0 || last))
            lg.val_map_pct = evaluate_model(model, val_set).map_pct;
        logs.push_back(lg);

        if (opts.stop_at_train_map > 0 && ((e + 1) % opts.stop_check_every == 0 || last)) {
            if (evaluate_model(model, train_set).map_pct >= opts.stop_at_train_map * 100) break;
        }
    }

    if (!log_csv_path.empty()) {
        CsvTable t;
        t.header = {"epoch", "lr", "box_loss", "obj_loss", "cls_loss", "total_loss", "val_map_pct"};
        for (const auto& lg : logs)
            t.rows.push_back({std::to_string(lg.epoch), fmt(lg.lr, 8), fmt(lg.box, 6), fmt(lg.obj, 6),
                              fmt(lg.cls, 6), fmt(lg.total, 6),
                              lg.val_map_pct ? fmt(*lg.val_map_pct, 4) : std::string()});
        write_csv(log_csv_path, t);
    }
    return logs;
}

EvalReport evaluate_model(const Model<float>& model, const std::vector<DatasetSample>& samples,
                          const DecodeParams& params, const std::string& tag) {
    EvalReport rep;
    rep.tag = tag;
    rep.param_count = model.reg.count();
    const int size = model.spec.input_size;

    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<LabeledBox>> gts;
    std::vector<size_t> idx{0};
    for (const auto& smp : samples) {
        auto x = make_var<float>(stack_images({smp}, idx, 0, 1, size), false);
        auto head = model.forward(x, false);
        dets.push_back(decode_detections(head->value, 0, model.spec, model.anchors, params));
        gts.push_back(smp.labels);
    }

    size_t tp = 0, num_det = 0, num_gt = 0;
    for (size_t i = 0; i < dets.size(); ++i) {
        num_det += dets[i].size();
        num_gt += gts[i].size();
        tp += count_true_positives(dets[i], gts[i], 0.5);
    }
    rep.precision_pct = num_det ? 100.0 * static_cast<double>(tp) / static_cast<double>(num_det) : 0.0;
    rep.recall_pct = num_gt ? 100.0 * static_cast<double>(tp) / static_cast<double>(num_gt) : 0.0;

    std::vector<APResult> per_class;
    for (int c = 0; c < kNumClasses; ++c) {
        const auto r = average_precision(dets, gts, c);
        per_class.push_back(r);
        rep.class_ap_pct[c] = r.defined ? r.ap * 100 : 0.0;
        rep.class_defined[c] = r.defined;
        if (!r.defined)
            rep.warnings.push_back(std::string("class ") + kClassNames[c] +
                                   " has no ground-truth boxes; its AP is excluded from mAP");
    }
    rep.map_pct = mean_ap(per_class) * 100;
    return rep;
}

void write_eval_report_csv(const std::string& path, const std::vector<EvalReport>& rows) {
    CsvTable t;
    t.header = {"tag", "precision_pct", "recall_pct", "map50_pct"};
    for (int c = 0; c < kNumClasses; ++c) t.header.push_back(std::string("ap_") + kClassNames[c] + "_pct");
    t.header.push_back("params");
    for (const auto& r : rows) {
        std::vector<std::string> row{r.tag, fmt(r.precision_pct, 4), fmt(r.recall_pct, 4), fmt(r.map_pct, 4)};
        for (int c = 0; c < kNumClasses; ++c)
            row.push_back(r.class_defined[c] ? fmt(r.class_ap_pct[c], 4) : std::string());
        row.push_back(std::to_string(r.param_count));
        t.rows.push_back(std::move(row));
    }
    write_csv(path, t, {"ap_interpolation: all-point (continuous PASCAL)", "iou_thresh: 0.5", "conf_thresh: 0.25"});
}

void write_detections_jsonl(const std::string& path, const std::vector<std::string>& image_ids,
                            const std::vector<std::vector<Detection>>& dets) {
    if (image_ids.size() != dets.size())
        throw std::invalid_argument("write_detections_jsonl: id/detection count mismatch");
    std::ofstream f(path);
    if (!f) throw std::runtime_error("write_detections_jsonl: cannot open " + path);
    for (size_t i = 0; i < dets.size(); ++i)
        for (const auto& d : dets[i]) {
            nlohmann::json j;
            j["image_id"] = image_ids[i];
            j["class"] = kClassNames[d.class_id];
            j["x1"] = d.box.x1;
            j["y1"] = d.box.y1;
            j["x2"] = d.box.x2;
            j["y2"] = d.box.y2;
            j["confidence"] = d.confidence;
            f << j.dump() << '\n';
        }
    if (!f) throw std::runtime_error("write_detections_jsonl: write failed for " + path);
}

namespace {
struct Combo {
    char label;
    bool ac, mpd, bif;
};
constexpr Combo kCombos[8] = {{'A', false, false, false}, {'B', true, false, false}, {'C', false, true, false},
                              {'D', false, false, true},  {'E', true, true, false},  {'F', true, false, true},
                              {'G', false, true, true},   {'H', true, true, true}};

std::string combo_tag(const Combo& cb) {
    std::string s(1, cb.label);
    if (!cb.ac && !cb.mpd && !cb.bif) return s + " baseline";
    if (cb.ac) s += " +ac-sppcspc";
    if (cb.mpd) s += " +mpdiou";
    if (cb.bif) s += " +biformer";
    return s;
}
} // namespace

std::vector<AblationRow> run_ablation(const std::string& data_dir, const TrainConfig& cfg, const ModelSpec& base,
                                      const std::string& out_dir, const TrainOptions& opts) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const auto train_set = load_split(data_dir, "train");
    const auto val_set = load_split(data_dir, "val");
    const auto test_set = load_split(data_dir, "test");

    std::vector<AblationRow> rows;
    for (const auto& cb : kCombos) {
        AblationRow row;
        row.label = cb.label;
        row.ac_sppcspc = cb.ac;
        row.mpdiou = cb.mpd;
        row.biformer = cb.bif;
        const std::string label(1, cb.label);
        try {
            ModelSpec spec = base;
            spec.use_ac_sppcspc = cb.ac;
            spec.use_esan = cb.bif;
            spec.box_loss = cb.mpd ? BoxLossKind::mpdiou : BoxLossKind::ciou;
            Model<float> model(spec, cfg.seed);
            train_model(model, train_set, val_set, cfg, (fs::path(out_dir) / ("train_" + label + ".csv")).string(),
                        opts);
            save_checkpoint(model, (fs::path(out_dir) / ("model_" + label + ".ckpt")).string());
            row.report = evaluate_model(model, test_set, {}, combo_tag(cb));
        } catch (const std::exception& ex) {
            row.error = ex.what();
        }
        rows.push_back(std::move(row));
    }

    CsvTable t;
    t.header = {"run", "ac_sppcspc", "mpdiou", "biformer", "precision_pct", "recall_pct", "map50_pct"};
    for (int c = 0; c < kNumClasses; ++c) t.header.push_back(std::string("ap_") + kClassNames[c] + "_pct");
    t.header.push_back("params");
    t.header.push_back("error");
    auto yn = [](bool v) { return std::string(v ? "yes" : "no"); };
    for (const auto& r : rows) {
        std::vector<std::string> row{std::string(1, r.label), yn(r.ac_sppcspc), yn(r.mpdiou), yn(r.biformer)};
        if (r.error.empty()) {
            row.push_back(fmt(r.report.precision_pct, 4));
            row.push_back(fmt(r.report.recall_pct, 4));
            row.push_back(fmt(r.report.map_pct, 4));
            for (int c = 0; c < kNumClasses; ++c)
                row.push_back(r.report.class_defined[c] ? fmt(r.report.class_ap_pct[c], 4) : std::string());
            row.push_back(std::to_string(r.report.param_count));
            row.push_back("");
        } else {
            for (int k = 0; k < 4 + kNumClasses; ++k) row.push_back("");
            std::string msg = r.error;
            std::replace(msg.begin(), msg.end(), ',', ';');
            row.push_back(msg);
        }
        t.rows.push_back(std::move(row));
    }
    write_csv((fs::path(out_dir) / "ablation.csv").string(), t);

    std::ofstream table((fs::path(out_dir) / "ablation.txt").string());
    table << format_ablation_table(rows);
    return rows;
}

std::string format_ablation_table(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    char line[256];
    os << "run  ac-sppcspc  mpdiou  biformer      P/%      R/%  mAP@0.5/%    params\n";
    os << "---  ----------  ------  --------  -------  -------  ---------  --------\n";
    for (const auto& r : rows) {
        if (!r.error.empty()) {
            std::snprintf(line, sizeof(line), "%-3c  %-10s  %-6s  %-8s  failed: %s\n", r.label,
                          r.ac_sppcspc ? "yes" : "no", r.mpdiou ? "yes" : "no", r.biformer ? "yes" : "no",
                          r.error.c_str());
        } else {
            std::snprintf(line, sizeof(line), "%-3c  %-10s  %-6s  %-8s  %7.2f  %7.2f  %9.2f  %8zu\n", r.label,
                          r.ac_sppcspc ? "yes" : "no", r.mpdiou ? "yes" : "no", r.biformer ? "yes" : "no",
                          r.report.precision_pct, r.report.recall_pct, r.report.map_pct, r.report.param_count);
        }
        os << line;
    }
    return os.str();
}

void write_heatmap(const Model<float>& model, const TensorF& image, const std::string& tag,
                   const std::string& out_path) {
    const std::string valid[] = {"sppcspc-out", "ac-sppcspc-out"};
    if (tag != valid[0] && tag != valid[1])
        throw std::invalid_argument("heatmap: unknown layer tag '" + tag + "'; valid tags: " + valid[0] + ", " +
                                    valid[1]);
    const int size = model.spec.input_size;
    std::vector<size_t> idx{0};
    const DatasetSample tmp{image, {}, "input"};
    auto x = make_var<float>(stack_images({tmp}, idx, 0, 1, size), false);
    model.forward(x, false);
    const auto it = model.taps.find(tag);
    if (it == model.taps.end())
        throw std::invalid_argument("heatmap: layer tag '" + tag + "' is not produced by this model; it produces '" +
                                    model.spp_tag() + "'");
    const TensorF& t = it->second; // [1,C,h,w]
    const int c = t.shape[1], h = t.shape[2], w = t.shape[3];

    std::vector<double> mean(static_cast<size_t>(h) * w, 0.0);
    for (int ci = 0; ci < c; ++ci)
        for (size_t p = 0; p < mean.size(); ++p)
            mean[p] += std::abs(static_cast<double>(t.data[static_cast<size_t>(ci) * h * w + p]));
    for (auto& v : mean) v /= c;

    // bilinear upsample to the input resolution
    std::vector<double> up(static_cast<size_t>(size) * size);
    for (int y = 0; y < size; ++y)
        for (int xo = 0; xo < size; ++xo) {
            const double fy = std::clamp((y + 0.5) * h / size - 0.5, 0.0, h - 1.0);
            const double fx = std::clamp((xo + 0.5) * w / size - 0.5, 0.0, w - 1.0);
            const int y0 = static_cast<int>(fy), x0 = static_cast<int>(fx);
            const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
            const double ay = fy - y0, ax = fx - x0;
            up[static_cast<size_t>(y) * size + xo] =
                (1 - ay) * ((1 - ax) * mean[static_cast<size_t>(y0) * w + x0] +
                            ax * mean[static_cast<size_t>(y0) * w + x1]) +
                ay * ((1 - ax) * mean[static_cast<size_t>(y1) * w + x0] +
                      ax * mean[static_cast<size_t>(y1) * w + x1]);
        }

    const auto [mn_it, mx_it] = std::minmax_element(up.begin(), up.end());
    const double mn = *mn_it, mx = *mx_it;
    ImageU8 img;
    img.w = size;
    img.h = size;
    img.channels = 1;
    img.data.resize(up.size());
    for (size_t p = 0; p < up.size(); ++p)
        img.data[p] = mx > mn ? static_cast<uint8_t>(std::lround((up[p] - mn) / (mx - mn) * 255.0))
                              : uint8_t{128}; // uniform activations -> mid-gray
    write_png(out_path, img);
}

size_t dense_attention_macs(int c, int h, int w) {
    const size_t hw = static_cast<size_t>(h) * w, C = static_cast<size_t>(c);
    size_t m = 3 * hw * C * C;   // q, k, v 1x1 projections
    m += 2 * hw * hw * C;        // affinity scores + weighted value sum
    m += 25 * C * hw;            // 5x5 depthwise local-context conv
    return m;
}

size_t bra_macs(int c, int h, int w, int S, int topk) {
    const size_t hw = static_cast<size_t>(h) * w, C = static_cast<size_t>(c);
    const size_t R = static_cast<size_t>(S) * S, t = hw / R;
    size_t m = 3 * hw * C * C;            // q, k, v 1x1 projections
    m += 2 * hw * C;                      // region mean pooling of q and k
    m += R * R * C;                       // region-to-region affinity
    m += 2 * R * t * (topk * t) * C;      // sparse scores + weighted value sum
    m += 25 * C * hw;                     // 5x5 depthwise local-context conv
    return m;
}

namespace {

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2;
}

double iqr_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[(3 * v.size()) / 4] - v[v.size() / 4];
}

Tensor<float> random_tensor(const std::vector<int>& shape, uint64_t seed, uint64_t stream) {
    Tensor<float> t(shape);
    Rng rng(seed, stream);
    for (auto& v : t.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    return t;
}

std::vector<double> time_ms(const std::function<void()>& fn, int repeats) {
    fn();
    fn(); // warm up caches and allocators
    std::vector<double> out;
    out.reserve(repeats);
    for (int i = 0; i < repeats; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        const auto t1 = std::chrono::steady_clock::now();
        out.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
    return out;
}

} // namespace

void run_bench(const std::string& out_csv, int repeats, uint64_t seed) {
    if (repeats < 1) throw std::invalid_argument("bench: repeats must be >= 1");

    std::vector<std::string> comments;
    utsname u{};
    if (uname(&u) == 0)
        comments.push_back(std::string("machine: ") + u.sysname + " " + u.release + " " + u.machine);
    comments.push_back("compiler: " + std::string(__VERSION__));
    comments.push_back("threads: " + std::to_string(num_threads()));
    comments.push_back("repeats: " + std::to_string(repeats));

    CsvTable t;
    t.header = {"section", "name", "input", "median_ms", "iqr_ms", "macs"};
    auto add_row = [&](const std::string& section, const std::string& name, const std::string& input,
                       const std::vector<double>& times, size_t macs) {
        t.rows.push_back({section, name, input, fmt(median_of(times), 4), fmt(iqr_of(times), 4),
                          macs ? std::to_string(macs) : std::string()});
    };

    // spatial pooling blocks on the backbone tap shape
    {
        ParamRegistry<float> reg;
        Rng r1(seed, 1), r2(seed, 2);
        SPPCSPC<float> spp(reg, "spp", 64, 64, 32, r1);
        ACSPPCSPC<float> acspp(reg, "acspp", 64, 64, 32, 4, r2);
        const auto x = make_var<float>(random_tensor({1, 64, 16, 16}, seed, 3), false);
        add_row("spp", "sppcspc", "1x64x16x16", time_ms([&] { spp.forward(x, false); }, repeats), 0);
        add_row("spp", "ac-sppcspc", "1x64x16x16", time_ms([&] { acspp.forward(x, false); }, repeats), 0);
    }

    // dense attention (single region) vs bi-level routing at several top-k
    {
        ParamRegistry<float> reg;
        Rng r1(seed, 4);
        BRA<float> dense(reg, "dense", 32, 1, 1, 4, 5, r1);
        const auto x = make_var<float>(random_tensor({1, 32, 16, 16}, seed, 5), false);
        add_row("attention", "dense", "1x32x16x16", time_ms([&] { dense.forward(x, false); }, repeats),
                dense_attention_macs(32, 16, 16));
        for (const int topk : {1, 2, 4}) {
            Rng rk(seed, 6 + static_cast<uint64_t>(topk));
            BRA<float> bra(reg, "bra_top" + std::to_string(topk), 32, 2, topk, 4, 5, rk);
            add_row("attention", "bra-s2-top" + std::to_string(topk), "1x32x16x16",
                    time_ms([&] { bra.forward(x, false); }, repeats), bra_macs(32, 16, 16, 2, topk));
        }
    }

    // convolution kernel: naive serial reference vs the parallel version
    {
        const auto x = random_tensor({1, 32, 32, 32}, seed, 10);
        const auto w = random_tensor({32, 32, 3, 3}, seed, 11);
        const auto d = kernels::conv_dims(x.shape, w.shape, 1, 1, 1);
        Tensor<float> y({d.batch, d.cout, d.ho, d.wo});
        const size_t macs = static_cast<size_t>(d.batch) * d.cout * d.ho * d.wo * (d.cin / d.groups) * d.kh * d.kw;
        add_row("conv2d", "reference-serial", "1x32x32x32",
                time_ms([&] { ref::conv2d_forward(x, w, static_cast<const float*>(nullptr), y, d); }, repeats), macs);
        add_row("conv2d", "openmp", "1x32x32x32",
                time_ms([&] { kernels::conv2d_forward(x, w, static_cast<const float*>(nullptr), y, d); }, repeats),
                macs);
    }

    write_csv(out_csv, t, comments);
}

} // namespace ddet
