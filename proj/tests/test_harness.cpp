#include "ddet/harness.hpp"
#include "ddet/png_io.hpp"

#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

using namespace ddet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("ddet_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<DatasetSample> make_samples(uint64_t seed, int count) {
    GenSpec spec;
    std::vector<DatasetSample> out;
    for (int i = 0; i < count; ++i) out.push_back(generate_sample(seed, i, spec));
    return out;
}

ModelSpec tiny_spec() {
    ModelSpec spec;
    spec.width_mult = 0.25;
    return spec;
}

} // namespace

TEST_CASE("cosine_lr decays from lr_init to lr_min") {
    CHECK(cosine_lr(0, 100, 0.01, 0.0001) == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(cosine_lr(99, 100, 0.01, 0.0001) == doctest::Approx(0.0001).epsilon(1e-12));
    for (int e = 1; e < 100; ++e) CHECK(cosine_lr(e, 100, 0.01, 0.0001) < cosine_lr(e - 1, 100, 0.01, 0.0001));
    CHECK(cosine_lr(0, 1, 0.01, 0.0001) == 0.01);
}

TEST_CASE("attention mac counts: routing at S=2 undercuts dense") {
    CHECK(dense_attention_macs(32, 16, 16) == 5185536);
    CHECK(bra_macs(32, 16, 16, 2, 1) == 2056704);
    CHECK(bra_macs(32, 16, 16, 2, 1) < dense_attention_macs(32, 16, 16));
    CHECK(bra_macs(32, 16, 16, 2, 1) < bra_macs(32, 16, 16, 2, 2));
    CHECK(bra_macs(32, 16, 16, 2, 2) < bra_macs(32, 16, 16, 2, 4));
}

TEST_CASE("load_split reads back the generated split files") {
    const auto dir = temp_dir("load_split");
    GenSpec spec;
    spec.count = 12;
    spec.seed = 9;
    generate_dataset(spec, dir.string());

    CHECK(load_split(dir.string(), "train").size() == 10);
    CHECK(load_split(dir.string(), "val").size() == 1);
    CHECK(load_split(dir.string(), "test").size() == 1);
    CHECK(load_split(dir.string(), "all").size() == 12);
    const auto train = load_split(dir.string(), "train");
    CHECK(train[0].image.shape == std::vector<int>{3, 64, 64});
    CHECK(!train[0].labels.empty());

    CHECK_THROWS_AS(load_split(dir.string(), "everything"), std::invalid_argument);
    fs::remove_all(dir);
}

TEST_CASE("train_model logs epochs to csv and validates its inputs") {
    const auto dir = temp_dir("train_log");
    const auto train_set = make_samples(1, 4);
    const auto val_set = make_samples(2, 1);

    Model<float> model(tiny_spec(), 0);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch = 2;
    const auto log_path = (dir / "train_log.csv").string();
    const auto logs = train_model(model, train_set, val_set, cfg, log_path);
    REQUIRE(logs.size() == 2);
    CHECK(logs[0].epoch == 0);
    CHECK(logs[0].lr == doctest::Approx(0.01));
    CHECK(logs[1].lr == doctest::Approx(0.0001));
    CHECK(logs[0].val_map_pct.has_value()); // val_every defaults to 1
    for (const auto& lg : logs) CHECK(std::isfinite(lg.total));

    const auto t = read_csv(log_path);
    CHECK(t.header == std::vector<std::string>{"epoch", "lr", "box_loss", "obj_loss", "cls_loss", "total_loss",
                                               "val_map_pct"});
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0][0] == "0");
    CHECK(t.rows[0][1] == "0.01000000");
    CHECK(t.rows[1][1] == "0.00010000");
    CHECK(!t.rows[0][6].empty());

    Model<float> m2(tiny_spec(), 0);
    CHECK_THROWS_AS(train_model(m2, {}, {}, cfg, ""), std::invalid_argument);
    TrainConfig bad = cfg;
    bad.epochs = 0;
    CHECK_THROWS_AS(train_model(m2, train_set, {}, bad, ""), std::invalid_argument);
    bad = cfg;
    bad.batch = 0;
    CHECK_THROWS_AS(train_model(m2, train_set, {}, bad, ""), std::invalid_argument);
    fs::remove_all(dir);
}

TEST_CASE("evaluate_model is deterministic and flags absent classes") {
    const auto samples = make_samples(3, 2);
    Model<float> model(tiny_spec(), 0);
    const auto a = evaluate_model(model, samples, {}, "t");
    const auto b = evaluate_model(model, samples, {}, "t");
    CHECK(a.tag == "t");
    CHECK(a.param_count == model.reg.count());
    CHECK(a.map_pct == b.map_pct);
    CHECK(a.precision_pct == b.precision_pct);
    CHECK(a.precision_pct >= 0);
    CHECK(a.precision_pct <= 100);
    CHECK(a.recall_pct >= 0);
    CHECK(a.recall_pct <= 100);
    for (int c = 0; c < 5; ++c)
        if (!a.class_defined[c]) CHECK(a.class_ap_pct[c] == 0);
    // 2 images hold at most 8 objects; with 5 classes some AP is usually
    // undefined, and each undefined class must carry a warning
    size_t undefined = 0;
    for (int c = 0; c < 5; ++c) undefined += a.class_defined[c] ? 0 : 1;
    CHECK(a.warnings.size() == undefined);
}

TEST_CASE("eval report csv round-trips through read_csv") {
    const auto dir = temp_dir("eval_csv");
    EvalReport r1;
    r1.tag = "model-a";
    r1.precision_pct = 81.25;
    r1.recall_pct = 64.5;
    r1.map_pct = 72.8125;
    r1.class_ap_pct = {100, 50, 0, 25, 12.5};
    r1.class_defined = {true, true, false, true, true};
    r1.param_count = 12345;
    EvalReport r2;
    r2.tag = "model-b";
    r2.param_count = 67;
    r2.class_defined = {false, false, false, false, false};

    const auto path = (dir / "eval.csv").string();
    write_eval_report_csv(path, {r1, r2});
    const auto t = read_csv(path); // comment lines must be skipped
    CHECK(t.header == std::vector<std::string>{"tag", "precision_pct", "recall_pct", "map50_pct", "ap_bj_pct",
                                               "ap_bj_mh_pct", "ap_bj_ps_pct", "ap_jyz_sh_pct", "ap_jyz_sl_pct",
                                               "params"});
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0][0] == "model-a");
    CHECK(t.rows[0][1] == "81.2500");
    CHECK(t.rows[0][3] == "72.8125");
    CHECK(t.rows[0][4] == "100.0000");
    CHECK(t.rows[0][6] == ""); // undefined AP stays blank
    CHECK(t.rows[0][9] == "12345");
    CHECK(t.rows[1][0] == "model-b");

    // the comments are physically present in the file
    std::ifstream f(path);
    std::string first_line;
    std::getline(f, first_line);
    CHECK(first_line.rfind("# ", 0) == 0);
    fs::remove_all(dir);
}

TEST_CASE("detections jsonl holds one parseable object per detection") {
    const auto dir = temp_dir("jsonl");
    std::vector<std::vector<Detection>> dets(2);
    dets[0].push_back({{1, 2, 11, 12}, 0, 0.9});
    dets[0].push_back({{5, 6, 25, 26}, 4, 0.5});
    dets[1] = {};
    const auto path = (dir / "d.jsonl").string();
    write_detections_jsonl(path, {"img_0", "img_1"}, dets);

    std::ifstream f(path);
    std::vector<nlohmann::json> lines;
    std::string line;
    while (std::getline(f, line)) lines.push_back(nlohmann::json::parse(line));
    REQUIRE(lines.size() == 2);
    CHECK(lines[0].at("image_id") == "img_0");
    CHECK(lines[0].at("class") == "bj");
    CHECK(lines[0].at("confidence").get<double>() == doctest::Approx(0.9));
    CHECK(lines[1].at("class") == "jyz_sl");
    CHECK(lines[1].at("x2").get<double>() == doctest::Approx(25));

    CHECK_THROWS_AS(write_detections_jsonl(path, {"only_one"}, dets), std::invalid_argument);
    fs::remove_all(dir);
}

TEST_CASE("format_ablation_table renders all rows and failures") {
    std::vector<AblationRow> rows;
    for (int i = 0; i < 8; ++i) {
        AblationRow r;
        r.label = static_cast<char>('A' + i);
        r.ac_sppcspc = i & 1;
        r.mpdiou = i & 2;
        r.biformer = i & 4;
        r.report.map_pct = 10.0 * i;
        r.report.param_count = 1000 + static_cast<size_t>(i);
        rows.push_back(r);
    }
    rows[3].error = "boom";
    const auto text = format_ablation_table(rows);
    CHECK(text.find("mAP@0.5/%") != std::string::npos);
    CHECK(text.find("failed: boom") != std::string::npos);
    for (char l = 'A'; l <= 'H'; ++l) CHECK(text.find(std::string("\n") + l + "  ") != std::string::npos);
    size_t newlines = 0;
    for (const char ch : text) newlines += ch == '\n' ? 1 : 0;
    CHECK(newlines == 10); // 2 header lines + 8 rows
}

TEST_CASE("heatmap writes a gray png at input resolution") {
    const auto dir = temp_dir("heatmap");
    Model<float> model(tiny_spec(), 0);
    const auto sample = generate_sample(0, 0, GenSpec{});
    const auto path = (dir / "h.png").string();
    write_heatmap(model, sample.image, "sppcspc-out", path);
    const auto img = read_png(path);
    CHECK(img.w == 64);
    CHECK(img.h == 64);
    CHECK(img.channels == 1);

    CHECK_THROWS_AS(write_heatmap(model, sample.image, "nonsense", path), std::invalid_argument);
    // valid tag, but this model variant does not produce it
    CHECK_THROWS_AS(write_heatmap(model, sample.image, "ac-sppcspc-out", path), std::invalid_argument);
    fs::remove_all(dir);
}

TEST_CASE("tiny ablation grid: 8 labeled runs with coherent param counts") {
    const auto data_dir = temp_dir("ablate_data");
    GenSpec gspec;
    gspec.count = 12;
    gspec.seed = 5;
    generate_dataset(gspec, data_dir.string());

    const auto out_dir = temp_dir("ablate_out");
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.batch = 8;
    TrainOptions opts;
    opts.val_every = 1;
    const auto rows = run_ablation(data_dir.string(), cfg, tiny_spec(), out_dir.string(), opts);

    REQUIRE(rows.size() == 8);
    for (int i = 0; i < 8; ++i) {
        CHECK(rows[i].label == 'A' + i);
        CHECK(rows[i].error == "");
    }
    CHECK(rows[7].ac_sppcspc);
    CHECK(rows[7].mpdiou);
    CHECK(rows[7].biformer);

    auto params = [&](char label) { return rows[label - 'A'].report.param_count; };
    // box-loss flag never changes the parameter count
    CHECK(params('A') == params('C'));
    CHECK(params('B') == params('E'));
    CHECK(params('D') == params('G'));
    CHECK(params('F') == params('H'));
    // both architectural swaps shrink the model; H is the smallest
    CHECK(params('B') < params('A'));
    CHECK(params('D') < params('A'));
    for (char l = 'A'; l < 'H'; ++l) CHECK(params('H') <= params(l));

    CHECK(fs::exists(out_dir / "ablation.csv"));
    CHECK(fs::exists(out_dir / "ablation.txt"));
    for (char l = 'A'; l <= 'H'; ++l) {
        CHECK(fs::exists(out_dir / ("train_" + std::string(1, l) + ".csv")));
        CHECK(fs::exists(out_dir / ("model_" + std::string(1, l) + ".ckpt")));
    }
    const auto t = read_csv((out_dir / "ablation.csv").string());
    REQUIRE(t.rows.size() == 8);
    CHECK(t.rows[0][0] == "A");
    CHECK(t.rows[7][0] == "H");
    CHECK(t.rows[7][1] == "yes");
    CHECK(t.header[0] == "run");

    // checkpoints reload into the evaluated parameter counts
    const auto h = load_checkpoint((out_dir / "model_H.ckpt").string());
    CHECK(h.spec.use_ac_sppcspc);
    CHECK(h.spec.use_esan);
    CHECK(h.spec.box_loss == BoxLossKind::mpdiou);
    CHECK(h.reg.count() == params('H'));

    fs::remove_all(data_dir);
    fs::remove_all(out_dir);
}
