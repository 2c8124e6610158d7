#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "gtsa/config.hpp"
#include "gtsa/data.hpp"
#include "gtsa/image_io.hpp"
#include "gtsa/probe.hpp"
#include "gtsa/threading.hpp"
#include "gtsa/trainer.hpp"

namespace {

void echo_config(const gtsa::TrainConfig& cfg, uint64_t seed) {
  std::cout << "# resolved config\n" << gtsa::serialize_config(cfg);
  std::cout << "# seed " << seed << "\n";
  std::cout << "# threads " << gtsa::thread_count() << "\n";
}

gtsa::Dataset resolve_dataset(const std::string& data_dir, int64_t synthetic, int image_size,
                              uint64_t seed) {
  if (!data_dir.empty()) return gtsa::load_dataset(data_dir, image_size);
  return gtsa::synth_dataset(gtsa::hash_mix(seed, 0x64617461ull), static_cast<int>(synthetic),
                             image_size);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GTSA teacher-student pretraining and probes"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_path, ckpt_path, image_path, family;
  int64_t synthetic = 0;
  int k = 16, n = 16, size = 64, n_views = 10;
  uint64_t seed = 0;
  bool overlay = true;

  CLI::App* pretrain = app.add_subcommand("pretrain", "train on a directory or synthetic scenes");
  pretrain->add_option("--config", config_path, "config file")->required();
  pretrain->add_option("--data", data_dir, "image directory");
  pretrain->add_option("--synthetic", synthetic, "synthetic scene count");
  pretrain->add_option("--out", out_path, "output directory")->required();

  CLI::App* probe = app.add_subcommand("probe", "transform-sensitivity report");
  probe->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  probe->add_option("--data", data_dir, "image directory");
  probe->add_option("--synthetic", synthetic, "synthetic scene count");
  probe->add_option("--family", family, "transform family")
      ->required()
      ->check(CLI::IsMember({"color_jitter", "four_fold_rotation", "crop_multicrop"}));
  probe->add_option("--out", out_path, "output csv")->required();
  probe->add_option("--views", n_views, "views per image");
  probe->add_option("--seed", seed, "probe seed");

  CLI::App* match = app.add_subcommand("match", "export matched patch pairs");
  match->add_option("--ckpt", ckpt_path, "checkpoint")->required();
  match->add_option("--image", image_path, "source image")->required();
  match->add_option("--k", k, "retained pairs")->required();
  match->add_option("--out", out_path, "output prefix")->required();
  match->add_option("--seed", seed, "view-sampling seed");
  match->add_flag("--overlay,!--no-overlay", overlay, "write the overlay png");

  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient check");
  gradcheck->add_option("--config", config_path, "config file (default: built-in tiny config)");
  gradcheck->add_option("--seed", seed, "sampling seed");

  CLI::App* synth = app.add_subcommand("synth", "write synthetic scenes as png");
  synth->add_option("--n", n, "image count")->required();
  synth->add_option("--size", size, "image side, pixels")->required();
  synth->add_option("--seed", seed, "generator seed")->required();
  synth->add_option("--out", out_path, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (pretrain->parsed()) {
      if (data_dir.empty() == (synthetic <= 0)) {
        std::cerr << "pretrain: exactly one of --data and --synthetic is required\n";
        return 1;
      }
      const gtsa::TrainConfig cfg = gtsa::load_config_file(config_path);
      echo_config(cfg, cfg.seed);
      const gtsa::Dataset data = resolve_dataset(data_dir, synthetic, cfg.image_size, cfg.seed);
      std::cout << "# dataset " << data.count() << " images, " << data.size << "px\n";
      gtsa::run_pretrain(cfg, data, out_path);
      std::cout << "# wrote " << out_path << "/final.gtsa and metrics.csv\n";
    } else if (probe->parsed()) {
      if (data_dir.empty() == (synthetic <= 0)) {
        std::cerr << "probe: exactly one of --data and --synthetic is required\n";
        return 1;
      }
      const gtsa::Checkpoint ck = gtsa::load_checkpoint(ckpt_path);
      echo_config(ck.cfg, seed);
      const gtsa::Dataset data = resolve_dataset(data_dir, synthetic, ck.cfg.image_size, seed);
      const gtsa::EncoderFn enc =
          gtsa::student_encoder(ck.state.student, gtsa::arch_of(ck.cfg));
      const gtsa::ProbeResult r =
          gtsa::sensitivity(enc, data, family, n_views, seed, ck.cfg);
      gtsa::write_probe_csv({r}, out_path);
      std::cout << r.family << " mean_variance " << r.mean_variance << "\n";
    } else if (match->parsed()) {
      const gtsa::Checkpoint ck = gtsa::load_checkpoint(ckpt_path);
      echo_config(ck.cfg, seed);
      const gtsa::ImageU8 img = gtsa::read_image(image_path);
      const gtsa::MatchExport m =
          gtsa::export_matches(ck.state.student, ck.state.teacher, gtsa::arch_of(ck.cfg),
                               ck.cfg, img, k, seed);
      gtsa::write_match_csv(m, out_path + "_matches.csv");
      if (overlay) gtsa::write_png(out_path + "_overlay.png", gtsa::render_match_overlay(m));
      std::cout << "# wrote " << m.records.size() << " pairs\n";
    } else if (gradcheck->parsed()) {
      const gtsa::TrainConfig cfg = config_path.empty() ? gtsa::gradcheck_default_config()
                                                        : gtsa::load_config_file(config_path);
      echo_config(cfg, seed);
      const gtsa::GradcheckReport rep = gtsa::gradcheck(cfg, seed);
      for (const gtsa::GradcheckGroup& g : rep.groups)
        std::printf("%-16s %10.3e  (%d checked)\n", g.name.c_str(), g.max_rel_err, g.checked);
      std::printf("max relative error %.3e -> %s\n", rep.max_rel_err,
                  rep.pass ? "pass" : "FAIL");
      if (!rep.pass) return 2;
    } else if (synth->parsed()) {
      std::cout << "# seed " << seed << "\n";
      const gtsa::Dataset data = gtsa::synth_dataset(seed, n, size);
      std::filesystem::create_directories(out_path);
      for (size_t i = 0; i < data.count(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "/synth_%04zu.png", i);
        gtsa::write_png(out_path + name, data.images[i]);
      }
      std::cout << "# wrote " << data.count() << " images to " << out_path << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
