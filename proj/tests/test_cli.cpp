#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "gtsa/config.hpp"
#include "gtsa/data.hpp"
#include "gtsa/image_io.hpp"
#include "gtsa/model.hpp"
#include "gtsa/probe.hpp"
#include "gtsa/rng.hpp"
#include "gtsa/trainer.hpp"
#include "test_util.hpp"

using namespace gtsa;
using testutil::TempDir;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

const char* cli_bin() {
  const char* bin = std::getenv("GTSA_BIN");
  REQUIRE_MESSAGE(bin != nullptr, "GTSA_BIN must point at the gtsa binary");
  return bin;
}

RunResult run_cli(const TempDir& tmp, const std::vector<std::string>& args) {
  static int serial = 0;
  const std::string so = tmp.file("stdout." + std::to_string(serial));
  const std::string se = tmp.file("stderr." + std::to_string(serial));
  ++serial;

  std::string cmd = std::string("'") + cli_bin() + "'";
  for (const std::string& a : args) cmd += " '" + a + "'";
  cmd += " >'" + so + "' 2>'" + se + "'";

  const int status = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = testutil::read_file(so);
  r.err = testutil::read_file(se);
  return r;
}

TrainConfig micro_config() {
  TrainConfig cfg = gradcheck_default_config();
  cfg.seed = 5;
  return cfg;
}

std::string write_micro_config(const TempDir& tmp) {
  const std::string path = tmp.file("micro.cfg");
  testutil::write_file(path, serialize_config(micro_config()));
  return path;
}

// Same dataset the binary builds for --synthetic n.
Dataset cli_synth(uint64_t seed, int n, int image_size) {
  return synth_dataset(hash_mix(seed, 0x64617461ull), n, image_size);
}

size_t count_occurrences(const std::string& hay, const std::string& needle) {
  size_t n = 0;
  for (size_t at = hay.find(needle); at != std::string::npos; at = hay.find(needle, at + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("cli rejects bad invocations with exit code 1") {
  TempDir tmp;
  CHECK(run_cli(tmp, {}).code == 1);
  CHECK(run_cli(tmp, {"frobnicate"}).code == 1);
  CHECK(run_cli(tmp, {"pretrain", "--out", tmp.file("o")}).code == 1);
  CHECK(run_cli(tmp, {"synth", "--n", "2", "--size", "16", "--seed", "1"}).code == 1);

  const RunResult fam = run_cli(tmp, {"probe", "--ckpt", tmp.file("c"), "--family", "cutout",
                                      "--out", tmp.file("p.csv"), "--synthetic", "2"});
  CHECK(fam.code == 1);

  const RunResult help = run_cli(tmp, {"--help"});
  CHECK(help.code == 0);
  CHECK(help.out.find("pretrain") != std::string::npos);
  CHECK(help.out.find("gradcheck") != std::string::npos);
}

TEST_CASE("pretrain demands exactly one data source") {
  TempDir tmp;
  const std::string cfg_path = write_micro_config(tmp);

  const RunResult neither =
      run_cli(tmp, {"pretrain", "--config", cfg_path, "--out", tmp.file("o1")});
  CHECK(neither.code == 1);
  CHECK(neither.err.find("exactly one of --data and --synthetic is required") !=
        std::string::npos);

  const RunResult both = run_cli(tmp, {"pretrain", "--config", cfg_path, "--data", tmp.path(),
                                       "--synthetic", "4", "--out", tmp.file("o2")});
  CHECK(both.code == 1);
  CHECK(both.err.find("exactly one of --data and --synthetic is required") != std::string::npos);
}

TEST_CASE("pretrain on synthetic data reproduces an in-process run byte for byte") {
  TempDir tmp;
  const TrainConfig cfg = micro_config();
  const std::string cfg_path = write_micro_config(tmp);
  const std::string out_dir = tmp.file("run");

  const RunResult r = run_cli(
      tmp, {"pretrain", "--config", cfg_path, "--synthetic", "4", "--out", out_dir});
  CHECK(r.code == 0);

  const std::string prefix = std::string("# resolved config\n") + serialize_config(cfg);
  CHECK(r.out.rfind(prefix, 0) == 0);
  CHECK(r.out.find("# seed 5\n") != std::string::npos);
  CHECK(r.out.find("# threads ") != std::string::npos);
  CHECK(r.out.find("# dataset 4 images, 32px\n") != std::string::npos);
  CHECK(r.out.find("# wrote " + out_dir + "/final.gtsa and metrics.csv") != std::string::npos);

  const std::string want_dir = tmp.file("want");
  run_pretrain(cfg, cli_synth(cfg.seed, 4, cfg.image_size), want_dir);
  CHECK(testutil::read_file(out_dir + "/final.gtsa") ==
        testutil::read_file(want_dir + "/final.gtsa"));
  CHECK(testutil::read_file(out_dir + "/metrics.csv") ==
        testutil::read_file(want_dir + "/metrics.csv"));
}

TEST_CASE("synth writes deterministic pngs") {
  TempDir tmp;
  const std::string dir = tmp.file("scenes");
  const RunResult r =
      run_cli(tmp, {"synth", "--n", "3", "--size", "24", "--seed", "7", "--out", dir});
  CHECK(r.code == 0);
  CHECK(r.out.find("# seed 7\n") != std::string::npos);
  CHECK(r.out.find("# wrote 3 images to " + dir) != std::string::npos);

  const Dataset want = synth_dataset(7, 3, 24);
  for (int i = 0; i < 3; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "/synth_%04d.png", i);
    const ImageU8 got = read_image(dir + name);
    CHECK(got.w == 24);
    CHECK(got.h == 24);
    CHECK(got.rgb == want.images[static_cast<size_t>(i)].rgb);
  }
  CHECK(!std::filesystem::exists(dir + "/synth_0003.png"));
}

TEST_CASE("probe subcommand writes the sensitivity csv") {
  TempDir tmp;
  const TrainConfig cfg = micro_config();
  const std::string ck_dir = tmp.file("ck");
  run_pretrain(cfg, cli_synth(cfg.seed, 4, cfg.image_size), ck_dir);
  const std::string ckpt = ck_dir + "/final.gtsa";
  const std::string csv = tmp.file("probe.csv");

  const RunResult r =
      run_cli(tmp, {"probe", "--ckpt", ckpt, "--synthetic", "3", "--family", "color_jitter",
                    "--out", csv, "--views", "4", "--seed", "9"});
  CHECK(r.code == 0);
  CHECK(r.out.find("# seed 9\n") != std::string::npos);
  CHECK(r.out.find("color_jitter mean_variance ") != std::string::npos);

  const Checkpoint ck = load_checkpoint(ckpt);
  const EncoderFn enc = student_encoder(ck.state.student, arch_of(ck.cfg));
  const Dataset data = cli_synth(9, 3, ck.cfg.image_size);
  const ProbeResult want = sensitivity(enc, data, "color_jitter", 4, 9, ck.cfg);
  const std::string want_csv = tmp.file("want.csv");
  write_probe_csv({want}, want_csv);
  CHECK(testutil::read_file(csv) == testutil::read_file(want_csv));

  const RunResult neither = run_cli(
      tmp, {"probe", "--ckpt", ckpt, "--family", "color_jitter", "--out", tmp.file("p2.csv")});
  CHECK(neither.code == 1);
  CHECK(neither.err.find("exactly one of --data and --synthetic is required") !=
        std::string::npos);
}

TEST_CASE("match subcommand writes csv plus optional overlay") {
  TempDir tmp;
  const TrainConfig cfg = micro_config();
  const std::string ck_dir = tmp.file("ck");
  run_pretrain(cfg, cli_synth(cfg.seed, 4, cfg.image_size), ck_dir);
  const std::string ckpt = ck_dir + "/final.gtsa";

  const std::string img_path = tmp.file("scene.png");
  write_png(img_path, synth_dataset(15, 1, 32).images[0]);

  const std::string prefix = tmp.file("m");
  const RunResult r = run_cli(tmp, {"match", "--ckpt", ckpt, "--image", img_path, "--k", "3",
                                    "--out", prefix, "--seed", "4"});
  CHECK(r.code == 0);
  CHECK(r.out.find("# wrote 3 pairs") != std::string::npos);

  const Checkpoint ck = load_checkpoint(ckpt);
  const MatchExport want = export_matches(ck.state.student, ck.state.teacher, arch_of(ck.cfg),
                                          ck.cfg, read_image(img_path), 3, 4);
  const std::string want_csv = tmp.file("want_matches.csv");
  write_match_csv(want, want_csv);
  CHECK(testutil::read_file(prefix + "_matches.csv") == testutil::read_file(want_csv));

  const ImageU8 overlay = read_image(prefix + "_overlay.png");
  const ImageU8 want_overlay = render_match_overlay(want);
  CHECK(overlay.w == want_overlay.w);
  CHECK(overlay.h == want_overlay.h);
  CHECK(overlay.rgb == want_overlay.rgb);

  const std::string p2 = tmp.file("m2");
  const RunResult r2 = run_cli(tmp, {"match", "--ckpt", ckpt, "--image", img_path, "--k", "2",
                                     "--out", p2, "--seed", "4", "--no-overlay"});
  CHECK(r2.code == 0);
  CHECK(std::filesystem::exists(p2 + "_matches.csv"));
  CHECK(!std::filesystem::exists(p2 + "_overlay.png"));
}

TEST_CASE("gradcheck prints per-group errors and a verdict") {
  TempDir tmp;
  const RunResult r = run_cli(tmp, {"gradcheck", "--seed", "1"});
  CHECK(r.code == 0);
  CHECK(r.out.find("# seed 1\n") != std::string::npos);
  CHECK(r.out.find("max relative error ") != std::string::npos);
  CHECK(r.out.find("-> pass") != std::string::npos);
  CHECK(r.out.find("FAIL") == std::string::npos);

  const size_t n_groups =
      init_student(arch_of(gradcheck_default_config()), 0).names.size();
  CHECK(count_occurrences(r.out, " checked)") == n_groups);
}

TEST_CASE("runtime failures exit 2 with an error prefix") {
  TempDir tmp;
  const RunResult cfg_missing = run_cli(
      tmp, {"pretrain", "--config", tmp.file("nope.cfg"), "--synthetic", "4", "--out",
            tmp.file("o")});
  CHECK(cfg_missing.code == 2);
  CHECK(cfg_missing.err.rfind("error: ", 0) == 0);

  const RunResult ck_missing =
      run_cli(tmp, {"match", "--ckpt", tmp.file("nope.gtsa"), "--image", tmp.file("img.png"),
                    "--k", "2", "--out", tmp.file("m")});
  CHECK(ck_missing.code == 2);
  CHECK(ck_missing.err.rfind("error: ", 0) == 0);
  CHECK(ck_missing.err.find("cannot open checkpoint") != std::string::npos);

  const std::string junk = tmp.file("junk.gtsa");
  testutil::write_file(junk, "garbage\n");
  const RunResult bad_ck =
      run_cli(tmp, {"probe", "--ckpt", junk, "--synthetic", "2", "--family", "color_jitter",
                    "--out", tmp.file("p.csv")});
  CHECK(bad_ck.code == 2);
  CHECK(bad_ck.err.rfind("error: ", 0) == 0);
  CHECK(bad_ck.err.find("unsupported checkpoint version") != std::string::npos);

  const RunResult bad_gc_cfg = run_cli(tmp, {"gradcheck", "--config", tmp.file("absent.cfg")});
  CHECK(bad_gc_cfg.code == 2);
  CHECK(bad_gc_cfg.err.rfind("error: ", 0) == 0);
}
