// defectdet: dataset generation, training, evaluation, ablation, heatmap
// export and micro-benchmarks for the synthetic defect detector.

#include "ddet/config.hpp"
#include "ddet/data.hpp"
#include "ddet/detector.hpp"
#include "ddet/harness.hpp"
#include "ddet/threading.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>

namespace fs = std::filesystem;
using namespace ddet;

namespace {

struct GlobalOpts {
    uint64_t seed = 0;
    std::string out_dir = "out";
    int threads = 1;
};

void add_global(CLI::App* sub, GlobalOpts& g) {
    sub->add_option("--seed", g.seed, "RNG seed (default 0)");
    sub->add_option("--out-dir", g.out_dir, "output directory (default 'out')");
    sub->add_option("--threads", g.threads, "worker threads, 1 = fully serial (default 1)");
}

Config load_config(const std::string& path) { return path.empty() ? Config() : Config::from_file(path); }

// config keys + CLI overrides -> training recipe; CLI flags win when given
TrainConfig train_config_from(const Config& cfg, const GlobalOpts& g) {
    TrainConfig tc;
    tc.epochs = static_cast<int>(cfg.get_int("epochs", tc.epochs));
    tc.lr_init = cfg.get_double("lr_init", tc.lr_init);
    tc.lr_min = cfg.get_double("lr_min", tc.lr_min);
    tc.batch = static_cast<int>(cfg.get_int("batch", tc.batch));
    tc.momentum = cfg.get_double("momentum", tc.momentum);
    tc.weight_decay = cfg.get_double("weight_decay", tc.weight_decay);
    tc.seed = g.seed;
    return tc;
}

ModelSpec model_spec_from(const Config& cfg) {
    ModelSpec spec;
    spec.use_ac_sppcspc = cfg.get_bool("use_ac_sppcspc", spec.use_ac_sppcspc);
    spec.use_esan = cfg.get_bool("use_esan", spec.use_esan);
    spec.box_loss = box_loss_from_name(cfg.get_str("box_loss", box_loss_name(spec.box_loss)));
    spec.width_mult = cfg.get_double("width_mult", spec.width_mult);
    spec.input_size = static_cast<int>(cfg.get_int("input_size", spec.input_size));
    return spec;
}

TrainOptions train_options_from(const Config& cfg) {
    TrainOptions opts;
    opts.val_every = static_cast<int>(cfg.get_int("val_every", opts.val_every));
    opts.stop_at_train_map = cfg.get_double("stop_at_train_map", opts.stop_at_train_map);
    opts.stop_check_every = static_cast<int>(cfg.get_int("stop_check_every", opts.stop_check_every));
    return opts;
}

void print_report(const EvalReport& r) {
    std::printf("tag:        %s\n", r.tag.c_str());
    std::printf("precision:  %.2f %%\n", r.precision_pct);
    std::printf("recall:     %.2f %%\n", r.recall_pct);
    std::printf("mAP@0.5:    %.2f %%\n", r.map_pct);
    for (int c = 0; c < kNumClasses; ++c) {
        if (r.class_defined[c])
            std::printf("AP %-8s %.2f %%\n", kClassNames[c], r.class_ap_pct[c]);
        else
            std::printf("AP %-8s n/a\n", kClassNames[c]);
    }
    std::printf("params:     %zu\n", r.param_count);
    for (const auto& w : r.warnings) std::printf("warning: %s\n", w.c_str());
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic defect detector: data generation, training, evaluation and benchmarks"};
    app.require_subcommand(1);

    // gen-data
    GlobalOpts g_gen;
    int gen_count = 64, gen_size = 64;
    double gen_clutter = 1.0;
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic defect dataset (PNG + VOC XML + splits)");
    add_global(gen, g_gen);
    gen->add_option("--count", gen_count, "number of images (default 64)");
    gen->add_option("--size", gen_size, "square image size in pixels (default 64)");
    gen->add_option("--clutter", gen_clutter, "background clutter level, 0 = uniform (default 1.0)");

    // train
    GlobalOpts g_train;
    std::string train_config_path, train_data;
    int ov_epochs = -1, ov_batch = -1;
    auto* train = app.add_subcommand("train", "train a detector with SGD + cosine LR decay");
    add_global(train, g_train);
    train->add_option("--config", train_config_path, "key=value config file");
    train->add_option("--data", train_data, "dataset directory (overrides config key 'data')");
    train->add_option("--epochs", ov_epochs, "override epoch count");
    train->add_option("--batch", ov_batch, "override batch size");

    // eval
    GlobalOpts g_eval;
    std::string eval_ckpt, eval_data, eval_split = "test", eval_tag = "model";
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    add_global(eval, g_eval);
    eval->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval->add_option("--data", eval_data, "dataset directory")->required();
    eval->add_option("--split", eval_split, "train|val|test|all (default test)");
    eval->add_option("--tag", eval_tag, "report row tag (default 'model')");

    // ablate
    GlobalOpts g_abl;
    std::string abl_config_path, abl_data;
    auto* abl = app.add_subcommand("ablate", "train + evaluate all 8 variant combinations (A..H)");
    add_global(abl, g_abl);
    abl->add_option("--config", abl_config_path, "key=value config file");
    abl->add_option("--data", abl_data, "dataset directory (overrides config key 'data')");

    // heatmap
    GlobalOpts g_heat;
    std::string heat_ckpt, heat_image, heat_layer = "sppcspc-out", heat_out;
    auto* heat = app.add_subcommand("heatmap", "export a layer-activation heatmap for one image");
    add_global(heat, g_heat);
    heat->add_option("--ckpt", heat_ckpt, "checkpoint file")->required();
    heat->add_option("--image", heat_image, "input PNG")->required();
    heat->add_option("--layer", heat_layer, "layer tag: sppcspc-out | ac-sppcspc-out");
    heat->add_option("--out", heat_out, "output PNG (default <out-dir>/heatmap_<layer>.png)");

    // bench
    GlobalOpts g_bench;
    int bench_repeats = 9;
    auto* bench = app.add_subcommand("bench", "block and kernel forward-timing micro-benchmarks");
    add_global(bench, g_bench);
    bench->add_option("--repeats", bench_repeats, "timed repetitions per case (default 9)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            set_num_threads(g_gen.threads);
            GenSpec spec;
            spec.seed = g_gen.seed;
            spec.count = gen_count;
            spec.size = gen_size;
            spec.clutter = gen_clutter;
            const auto entries = generate_dataset(spec, g_gen.out_dir);
            std::printf("wrote %zu samples to %s\n", entries.size(), g_gen.out_dir.c_str());
        } else if (train->parsed()) {
            set_num_threads(g_train.threads);
            const auto cfg = load_config(train_config_path);
            const std::string data = !train_data.empty() ? train_data : cfg.get_str("data");
            TrainConfig tc = train_config_from(cfg, g_train);
            if (ov_epochs > 0) tc.epochs = ov_epochs;
            if (ov_batch > 0) tc.batch = ov_batch;
            Model<float> model(model_spec_from(cfg), tc.seed);
            const auto train_set = load_split(data, cfg.get_str("train_split", "train"));
            const auto val_set = load_split(data, cfg.get_str("val_split", "val"));
            fs::create_directories(g_train.out_dir);
            const auto logs = train_model(model, train_set, val_set, tc,
                                          (fs::path(g_train.out_dir) / "train_log.csv").string(),
                                          train_options_from(cfg));
            save_checkpoint(model, (fs::path(g_train.out_dir) / "model.ckpt").string());
            std::printf("trained %zu epochs; final loss %.6f; checkpoint and train_log.csv in %s\n", logs.size(),
                        logs.back().total, g_train.out_dir.c_str());
        } else if (eval->parsed()) {
            set_num_threads(g_eval.threads);
            const auto model = load_checkpoint(eval_ckpt);
            const auto samples = load_split(eval_data, eval_split);
            const auto report = evaluate_model(model, samples, {}, eval_tag);
            fs::create_directories(g_eval.out_dir);
            write_eval_report_csv((fs::path(g_eval.out_dir) / "eval.csv").string(), {report});

            std::vector<std::string> ids;
            std::vector<std::vector<Detection>> dets;
            for (const auto& s : samples) {
                ids.push_back(s.image_id);
                Tensor<float> input({1, 3, model.spec.input_size, model.spec.input_size});
                std::copy(s.image.data.begin(), s.image.data.end(), input.data.begin());
                auto head = model.forward(make_var<float>(std::move(input), false), false);
                dets.push_back(decode_detections(head->value, 0, model.spec, model.anchors));
            }
            write_detections_jsonl((fs::path(g_eval.out_dir) / "detections.jsonl").string(), ids, dets);
            print_report(report);
        } else if (abl->parsed()) {
            set_num_threads(g_abl.threads);
            const auto cfg = load_config(abl_config_path);
            const std::string data = !abl_data.empty() ? abl_data : cfg.get_str("data");
            const auto rows =
                run_ablation(data, train_config_from(cfg, g_abl), model_spec_from(cfg), g_abl.out_dir,
                             train_options_from(cfg));
            std::fputs(format_ablation_table(rows).c_str(), stdout);
        } else if (heat->parsed()) {
            set_num_threads(g_heat.threads);
            const auto model = load_checkpoint(heat_ckpt);
            const auto image = u8_to_tensor(read_png(heat_image));
            fs::create_directories(g_heat.out_dir);
            const std::string out = !heat_out.empty()
                                        ? heat_out
                                        : (fs::path(g_heat.out_dir) / ("heatmap_" + heat_layer + ".png")).string();
            write_heatmap(model, image, heat_layer, out);
            std::printf("wrote %s\n", out.c_str());
        } else if (bench->parsed()) {
            set_num_threads(g_bench.threads);
            fs::create_directories(g_bench.out_dir);
            const std::string out = (fs::path(g_bench.out_dir) / "bench.csv").string();
            run_bench(out, bench_repeats, g_bench.seed);
            std::printf("wrote %s\n", out.c_str());
        }
    } catch (const std::exception& ex) {
        std::fprintf(stderr, "error: %s\n", ex.what());
        return 1;
    }
    return 0;
}
