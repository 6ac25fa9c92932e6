#include <CLI11.hpp>

#include <atomic>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <thread>

#include "vssa/checkpoint.hpp"
#include "vssa/evaluator.hpp"
#include "vssa/gradcheck.hpp"
#include "vssa/trainer.hpp"

namespace fs = std::filesystem;
using namespace vssa;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumeric = 3;

int worker_threads() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw < 1) hw = 1;
    if (const char* env = std::getenv("VSSA_THREADS")) {
        const int cap = std::atoi(env);
        if (cap >= 1 && cap < hw) hw = cap;
    }
    return hw;
}

fs::path default_out_dir(const std::string& cmd) {
    std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", std::localtime(&now));
    fs::path dir = fs::path("vssa-runs") / (std::string(stamp) + "-" + cmd);
    fs::create_directories(dir);
    return dir;
}

void ensure_parent(const fs::path& p) {
    if (!p.parent_path().empty()) fs::create_directories(p.parent_path());
}

struct LoadedModel {
    ModelConfig config;
    std::unique_ptr<DetectorModel<float>> model;
};

LoadedModel load_model(const fs::path& ckpt) {
    auto tensors = read_checkpoint(ckpt);
    LoadedModel lm;
    lm.config = config_from_checkpoint(tensors);
    lm.model = std::make_unique<DetectorModel<float>>(lm.config, 1);
    unpack_into_model(*lm.model, tensors);
    return lm;
}

std::vector<TrainSample> load_samples(const fs::path& dir, const std::string& split, int num_classes) {
    auto entries = load_split(dir, split);
    std::vector<TrainSample> out;
    out.reserve(entries.size());
    for (const auto& e : entries) {
        for (const auto& g : e.gts) {
            if (g.cls > num_classes) {
                throw FormatError("dataset " + dir.string() + " labels class " + std::to_string(g.cls) +
                                  " but the model is configured for " + std::to_string(num_classes) +
                                  " classes (set `classes` in the config)");
            }
        }
        out.push_back({read_ppm(dir / e.image_path), e.gts});
    }
    return out;
}

// Outline colors kept away from the scene palette so boxes stand out.
void draw_outline(Image8& im, const Box& b, int cls) {
    static const std::uint8_t palette[4][3] = {{255, 0, 255}, {0, 255, 255}, {60, 255, 60}, {255, 140, 0}};
    const std::uint8_t* col = palette[(cls - 1) % 4];
    const int x0 = std::clamp(static_cast<int>(std::lround(b.xmin)), 0, im.w - 1);
    const int x1 = std::clamp(static_cast<int>(std::lround(b.xmax)) - 1, 0, im.w - 1);
    const int y0 = std::clamp(static_cast<int>(std::lround(b.ymin)), 0, im.h - 1);
    const int y1 = std::clamp(static_cast<int>(std::lround(b.ymax)) - 1, 0, im.h - 1);
    for (int x = x0; x <= x1; ++x) {
        for (int c = 0; c < 3; ++c) {
            im.at(x, y0, c) = col[c];
            im.at(x, y1, c) = col[c];
        }
    }
    for (int y = y0; y <= y1; ++y) {
        for (int c = 0; c < 3; ++c) {
            im.at(x0, y, c) = col[c];
            im.at(x1, y, c) = col[c];
        }
    }
}

int cmd_gen_data(const std::string& out, int train_n, int test_n, std::uint64_t seed, double pole_rate,
                 int distractors, int classes, int image_size, int signs, double frac_min, double frac_max,
                 double clutter, bool distractor_pole, bool force) {
    fs::path dir = out.empty() ? default_out_dir("gen-data") / "dataset" : fs::path(out);
    if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
        throw ConfigError("output directory " + dir.string() + " is not empty (pass --force to overwrite)");
    }
    SceneSpec spec;
    spec.image_size = image_size;
    spec.num_classes = classes;
    spec.min_signs = spec.max_signs = signs;
    spec.pole_rate = pole_rate;
    spec.min_distractors = spec.max_distractors = distractors;
    spec.min_sign_frac = frac_min;
    spec.max_sign_frac = frac_max;
    spec.clutter = clutter;
    spec.distractor_pole = distractor_pole;
    spec.seed = seed;
    auto rep = generate_dataset(dir, spec, train_n, test_n);
    std::cout << "wrote " << rep.images << " images (" << rep.objects << " objects, " << rep.placement_failures
              << " placement retries exhausted) to " << dir.string() << "\n";
    return 0;
}

int cmd_train(const std::string& config_file, const std::string& data, const std::string& out,
              const std::string& orientation, const std::vector<std::string>& overrides) {
    TrainConfig cfg;
    if (!config_file.empty()) {
        cfg = parse_train_config(config_file);
    } else {
        std::cout << "no --config given; built-in defaults in effect\n";
    }
    for (const auto& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        apply_config_entry(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!orientation.empty()) cfg.model.orientation = orientation_from_string(orientation);
    cfg.validate();

    auto samples = load_samples(data, "train", cfg.model.num_classes);
    if (samples.empty()) throw FormatError("dataset " + data + " has no training samples");
    std::cout << "training on " << samples.size() << " images, orientation " << to_string(cfg.model.orientation)
              << ", " << cfg.iterations << " iterations\n";

    DetectorModel<float> model(cfg.model, cfg.seed);
    const int step = std::max(1, cfg.iterations / 20);
    auto result = train(model, samples, cfg, [&](int iter, double loss) {
        if ((iter + 1) % step == 0 || iter + 1 == cfg.iterations) {
            std::cout << "iter " << std::setw(6) << (iter + 1) << "  loss " << loss << "\n";
        }
    });

    fs::path ckpt = out.empty() ? default_out_dir("train") / "model.ckpt" : fs::path(out);
    ensure_parent(ckpt);
    write_checkpoint(ckpt, pack_model(model, static_cast<std::uint32_t>(cfg.iterations), true));

    fs::path loss_file = ckpt;
    loss_file += ".loss.txt";
    std::ofstream ls(loss_file);
    ls << std::setprecision(17) << "# iteration loss\n";
    for (std::size_t i = 0; i < result.loss_history.size(); ++i) ls << i << " " << result.loss_history[i] << "\n";

    fs::path cfg_file = ckpt;
    cfg_file += ".cfg";
    std::ofstream(cfg_file) << "# resolved training configuration\n"
                            << "# data: " << data << "\n"
                            << "# checkpoint: " << ckpt.string() << "\n"
                            << render_config(cfg);

    std::cout << "final loss " << (result.loss_history.empty() ? 0.0 : result.loss_history.back()) << " ("
              << result.skipped_samples << " degenerate samples skipped)\n"
              << "checkpoint: " << ckpt.string() << "\n";
    return 0;
}

std::vector<EvalInstance> score_split(const DetectorModel<float>& model, const fs::path& data,
                                      const std::string& split) {
    auto entries = load_split(data, split);
    std::vector<Image8> images;
    images.reserve(entries.size());
    for (const auto& e : entries) images.push_back(read_ppm(data / e.image_path));

    std::vector<EvalInstance> insts(entries.size());
    for (std::size_t i = 0; i < entries.size(); ++i) insts[i].gts = entries[i].gts;

    const int input = model.config().input_size;
    const int nt = std::min<int>(worker_threads(), static_cast<int>(images.size()));
    if (nt <= 1) {
        for (std::size_t i = 0; i < images.size(); ++i) insts[i].dets = run_inference(model, images[i], input);
    } else {
        std::atomic<std::size_t> next{0};
        auto work = [&] {
            for (std::size_t i; (i = next.fetch_add(1)) < images.size();) {
                insts[i].dets = run_inference(model, images[i], input);
            }
        };
        std::vector<std::thread> pool;
        for (int t = 0; t < nt; ++t) pool.emplace_back(work);
        for (auto& t : pool) t.join();
    }
    return insts;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& split, double iou,
             const std::string& out) {
    auto lm = load_model(ckpt);
    auto insts = score_split(*lm.model, data, split);
    auto report = evaluate(insts, lm.config.num_classes, iou);
    std::cout << report.text_table();
    if (!out.empty()) {
        ensure_parent(out);
        std::ofstream os(out);
        os << "# ckpt: " << ckpt << "\n# data: " << data << "\n# split: " << split << "\n# iou: " << iou << "\n"
           << report.delimited();
        std::cout << "report: " << out << "\n";
    }
    return 0;
}

int cmd_detect(const std::string& ckpt, const std::string& image_path, const std::string& out, double thresh) {
    auto lm = load_model(ckpt);
    Image8 image = read_ppm(image_path);
    auto dets = run_inference(*lm.model, image, lm.config.input_size, thresh);

    fs::path overlay_path = out.empty() ? default_out_dir("detect") / "overlay.ppm" : fs::path(out);
    ensure_parent(overlay_path);
    Image8 overlay = image;
    for (const auto& d : dets) draw_outline(overlay, d.box, d.cls);
    write_ppm(overlay_path, overlay);

    fs::path list_path = overlay_path;
    list_path.replace_extension(".txt");
    std::ofstream os(list_path);
    os << std::setprecision(17);
    for (const auto& d : dets) {
        os << d.cls << " " << d.score << " " << d.box.xmin << " " << d.box.ymin << " " << d.box.xmax << " "
           << d.box.ymax << "\n";
    }
    std::cout << dets.size() << " detections; overlay " << overlay_path.string() << ", list " << list_path.string()
              << "\n";
    return 0;
}

int cmd_gradcheck(const std::string& op) {
    const auto& checks = standard_grad_checks();
    bool any = false;
    bool failed = false;
    for (const auto& c : checks) {
        if (op != "all" && op != c.name) continue;
        any = true;
        auto rep = c.run();
        if (rep.ok) {
            std::cout << c.name << ": ok (max rel err " << rep.max_rel_err << ", " << rep.coords_checked
                      << " coords)\n";
        } else {
            failed = true;
            std::cout << c.name << ": FAIL " << rep.detail << "\n";
        }
    }
    if (!any) {
        std::string names;
        for (const auto& c : checks) names += "\n  " + c.name;
        throw ConfigError("unknown gradcheck op '" + op + "'; available:" + names);
    }
    if (failed) {
        std::cerr << "gradient check failed\n";
        return kExitNumeric;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"vssa: small-object detector with vertical-context heads"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "generate a synthetic sign dataset");
    std::string gen_out;
    int gen_train = 8, gen_test = 4, gen_distractors = 0, gen_classes = 3, gen_size = 128, gen_signs = 1;
    std::uint64_t gen_seed = 1;
    double gen_pole = 1.0, gen_frac_min = 0.14, gen_frac_max = 0.20, gen_clutter = 0.05;
    bool gen_pole_distractors = false, gen_force = false;
    gen->add_option("--out", gen_out, "output directory");
    gen->add_option("--train", gen_train, "training images")->check(CLI::NonNegativeNumber);
    gen->add_option("--test", gen_test, "test images")->check(CLI::NonNegativeNumber);
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--pole-rate", gen_pole, "fraction of signs standing on a pole")->check(CLI::Range(0.0, 1.0));
    gen->add_option("--distractors", gen_distractors, "unlabeled look-alikes per image")->check(CLI::NonNegativeNumber);
    gen->add_option("--classes", gen_classes, "glyph classes (1-3)")->check(CLI::Range(1, 3));
    gen->add_option("--image-size", gen_size, "square image side")->check(CLI::PositiveNumber);
    gen->add_option("--signs", gen_signs, "labeled signs per image")->check(CLI::PositiveNumber);
    gen->add_option("--sign-frac-min", gen_frac_min, "smallest glyph side / image side")->check(CLI::Range(0.01, 1.0));
    gen->add_option("--sign-frac-max", gen_frac_max, "largest glyph side / image side")->check(CLI::Range(0.01, 1.0));
    gen->add_option("--clutter", gen_clutter, "background block density")->check(CLI::Range(0.0, 1.0));
    gen->add_flag("--distractor-pole", gen_pole_distractors, "stand distractors on poles too");
    gen->add_flag("--force", gen_force, "overwrite a non-empty output directory");

    auto* tr = app.add_subcommand("train", "train a detector");
    std::string tr_config, tr_data, tr_out, tr_orient;
    std::vector<std::string> tr_set;
    tr->add_option("--config", tr_config, "key = value config file");
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "checkpoint path");
    tr->add_option("--orientation", tr_orient, "vertical|horizontal|none (overrides config)");
    tr->add_option("--set", tr_set, "config override key=value (repeatable)");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    std::string ev_ckpt, ev_data, ev_split = "test", ev_out;
    double ev_iou = 0.5;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--split", ev_split, "train|test");
    ev->add_option("--iou", ev_iou, "match threshold")->check(CLI::Range(0.0, 1.0));
    ev->add_option("--out", ev_out, "write the report here as well");

    auto* de = app.add_subcommand("detect", "run one image and write an overlay");
    std::string de_ckpt, de_image, de_out;
    double de_thresh = 0.5;
    de->add_option("--ckpt", de_ckpt, "checkpoint path")->required();
    de->add_option("--image", de_image, "input PPM")->required();
    de->add_option("--out", de_out, "overlay PPM path (detections list lands next to it)");
    de->add_option("--thresh", de_thresh, "score threshold")->check(CLI::Range(0.0, 1.0));

    auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of the backward pass");
    std::string gc_op = "all";
    gc->add_option("--op", gc_op, "check name, or 'all'");

    try {
        app.parse(argc, argv);
        if (app.got_subcommand(gen)) {
            return cmd_gen_data(gen_out, gen_train, gen_test, gen_seed, gen_pole, gen_distractors, gen_classes,
                                gen_size, gen_signs, gen_frac_min, gen_frac_max, gen_clutter, gen_pole_distractors,
                                gen_force);
        }
        if (app.got_subcommand(tr)) return cmd_train(tr_config, tr_data, tr_out, tr_orient, tr_set);
        if (app.got_subcommand(ev)) return cmd_eval(ev_ckpt, ev_data, ev_split, ev_iou, ev_out);
        if (app.got_subcommand(de)) return cmd_detect(de_ckpt, de_image, de_out, de_thresh);
        if (app.got_subcommand(gc)) return cmd_gradcheck(gc_op);
        return kExitUsage;
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const NumericalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
}
