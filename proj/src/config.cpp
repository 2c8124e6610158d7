#include "gtsa/config.hpp"

#include <cctype>
#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <vector>

namespace gtsa {

namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double r = std::strtod(v.c_str(), &end);
  if (end == v.c_str() || *end != '\0')
    throw std::invalid_argument("config: bad number for " + key + ": " + v);
  return r;
}

int64_t parse_i64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const long long r = std::strtoll(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw std::invalid_argument("config: bad integer for " + key + ": " + v);
  return static_cast<int64_t>(r);
}

int parse_int(const std::string& key, const std::string& v) {
  return static_cast<int>(parse_i64(key, v));
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const unsigned long long r = std::strtoull(v.c_str(), &end, 10);
  if (end == v.c_str() || *end != '\0')
    throw std::invalid_argument("config: bad unsigned integer for " + key + ": " + v);
  return static_cast<uint64_t>(r);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: bad bool for " + key + ": " + v);
}

struct KeyDef {
  const char* name;
  void (*set)(TrainConfig&, const std::string&, const std::string&);
  std::string (*get)(const TrainConfig&);
};

#define GTSA_KEY_INT(field)                                                             \
  KeyDef{#field, [](TrainConfig& c, const std::string& k, const std::string& v) {       \
           c.field = parse_int(k, v);                                                   \
         },                                                                             \
         [](const TrainConfig& c) { return std::to_string(c.field); }}
#define GTSA_KEY_I64(field)                                                             \
  KeyDef{#field, [](TrainConfig& c, const std::string& k, const std::string& v) {       \
           c.field = parse_i64(k, v);                                                   \
         },                                                                             \
         [](const TrainConfig& c) { return std::to_string(c.field); }}
#define GTSA_KEY_U64(field)                                                             \
  KeyDef{#field, [](TrainConfig& c, const std::string& k, const std::string& v) {       \
           c.field = parse_u64(k, v);                                                   \
         },                                                                             \
         [](const TrainConfig& c) { return std::to_string(c.field); }}
#define GTSA_KEY_DBL(field)                                                             \
  KeyDef{#field, [](TrainConfig& c, const std::string& k, const std::string& v) {       \
           c.field = parse_double(k, v);                                                \
         },                                                                             \
         [](const TrainConfig& c) { return fmt_double(c.field); }}
#define GTSA_KEY_BOOL(field)                                                            \
  KeyDef{#field, [](TrainConfig& c, const std::string& k, const std::string& v) {       \
           c.field = parse_bool(k, v);                                                  \
         },                                                                             \
         [](const TrainConfig& c) { return std::string(c.field ? "true" : "false"); }}

const std::vector<KeyDef>& key_table() {
  static const std::vector<KeyDef> keys = {
      GTSA_KEY_INT(n_global),
      GTSA_KEY_INT(n_local),
      GTSA_KEY_INT(global_size),
      GTSA_KEY_INT(local_size),
      GTSA_KEY_DBL(global_area_min),
      GTSA_KEY_DBL(global_area_max),
      GTSA_KEY_DBL(local_area_min),
      GTSA_KEY_DBL(local_area_max),
      GTSA_KEY_INT(min_image),
      GTSA_KEY_DBL(jitter_strength),
      GTSA_KEY_DBL(p_grayscale),
      GTSA_KEY_DBL(p_blur_global),
      GTSA_KEY_DBL(p_blur_local),
      GTSA_KEY_DBL(p_noise),
      GTSA_KEY_DBL(blur_sigma_min),
      GTSA_KEY_DBL(blur_sigma_max),
      GTSA_KEY_DBL(noise_sigma),
      GTSA_KEY_INT(patch),
      GTSA_KEY_INT(dim),
      GTSA_KEY_INT(depth),
      GTSA_KEY_INT(heads),
      GTSA_KEY_INT(mlp_ratio),
      GTSA_KEY_BOOL(encoder_norm),
      GTSA_KEY_INT(proj_blocks),
      GTSA_KEY_INT(pred_blocks),
      GTSA_KEY_INT(pool_size),
      GTSA_KEY_INT(match_k),
      GTSA_KEY_DBL(alpha),
      GTSA_KEY_DBL(beta),
      GTSA_KEY_BOOL(loss_overlap),
      GTSA_KEY_BOOL(loss_pc),
      GTSA_KEY_BOOL(loss_rp),
      GTSA_KEY_DBL(base_lr),
      GTSA_KEY_DBL(weight_decay),
      GTSA_KEY_DBL(clip_norm),
      GTSA_KEY_I64(warmup_steps),
      GTSA_KEY_INT(epochs),
      GTSA_KEY_I64(total_steps),
      GTSA_KEY_INT(batch_size),
      GTSA_KEY_DBL(m0),
      GTSA_KEY_INT(image_size),
      GTSA_KEY_U64(seed),
      GTSA_KEY_INT(ckpt_every),
  };
  return keys;
}

#undef GTSA_KEY_INT
#undef GTSA_KEY_I64
#undef GTSA_KEY_U64
#undef GTSA_KEY_DBL
#undef GTSA_KEY_BOOL

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("config: ") + what);
}

}  // namespace

TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                  " is not key = value: " + line);
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    bool found = false;
    for (const KeyDef& def : key_table())
      if (key == def.name) {
        def.set(cfg, key, val);
        found = true;
        break;
      }
    if (!found) throw std::invalid_argument("config: unknown key: " + key);
  }
  validate_config(cfg);
  return cfg;
}

TrainConfig load_config_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path + ": cannot open config file");
  std::ostringstream ss;
  ss << f.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

std::string serialize_config(const TrainConfig& cfg) {
  std::string out;
  for (const KeyDef& def : key_table()) {
    out += def.name;
    out += " = ";
    out += def.get(cfg);
    out += "\n";
  }
  return out;
}

void validate_config(const TrainConfig& cfg) {
  require(cfg.n_global >= 2, "n_global must be >= 2");
  require(cfg.n_local >= 0, "n_local must be >= 0");
  require(cfg.patch >= 1, "patch must be >= 1");
  require(cfg.global_size > 0 && cfg.global_size % cfg.patch == 0,
          "global_size must be a positive multiple of patch");
  require(cfg.local_size > 0 && cfg.local_size % cfg.patch == 0,
          "local_size must be a positive multiple of patch");
  require(cfg.global_area_min >= 0.5 && cfg.global_area_min <= cfg.global_area_max &&
              cfg.global_area_max <= 1.0,
          "global area fractions must satisfy 0.5 <= min <= max <= 1");
  require(cfg.local_area_min > 0 && cfg.local_area_min <= cfg.local_area_max &&
              cfg.local_area_max <= 1.0,
          "local area fractions must satisfy 0 < min <= max <= 1");
  require(cfg.min_image >= 1, "min_image must be >= 1");
  require(cfg.jitter_strength >= 0, "jitter_strength must be >= 0");
  require(cfg.p_grayscale >= 0 && cfg.p_grayscale <= 1, "p_grayscale must be in [0,1]");
  require(cfg.p_blur_global >= 0 && cfg.p_blur_global <= 1, "p_blur_global must be in [0,1]");
  require(cfg.p_blur_local >= 0 && cfg.p_blur_local <= 1, "p_blur_local must be in [0,1]");
  require(cfg.p_noise >= 0 && cfg.p_noise <= 1, "p_noise must be in [0,1]");
  require(cfg.blur_sigma_min > 0 && cfg.blur_sigma_min <= cfg.blur_sigma_max,
          "blur sigmas must satisfy 0 < min <= max");
  require(cfg.noise_sigma >= 0, "noise_sigma must be >= 0");
  require(cfg.dim > 0 && cfg.dim % 4 == 0, "dim must be a positive multiple of 4");
  require(cfg.heads > 0 && cfg.dim % cfg.heads == 0, "dim must be divisible by heads");
  require(cfg.depth >= 1, "depth must be >= 1");
  require(cfg.mlp_ratio >= 1, "mlp_ratio must be >= 1");
  require(cfg.proj_blocks >= 1, "proj_blocks must be >= 1");
  require(cfg.pred_blocks >= 1, "pred_blocks must be >= 1");
  require(cfg.pool_size >= 1, "pool_size must be >= 1");
  require(cfg.match_k >= 1, "match_k must be >= 1");
  require(cfg.alpha >= 0, "alpha must be >= 0");
  require(cfg.beta >= 0, "beta must be >= 0");
  require(cfg.loss_overlap || cfg.loss_pc || cfg.loss_rp,
          "at least one loss term must be enabled");
  require(cfg.base_lr >= 0, "base_lr must be >= 0");
  require(cfg.weight_decay >= 0, "weight_decay must be >= 0");
  require(cfg.clip_norm >= 0, "clip_norm must be >= 0");
  require(cfg.epochs >= 1, "epochs must be >= 1");
  require(cfg.total_steps >= 0, "total_steps must be >= 0");
  require(cfg.batch_size >= 1, "batch_size must be >= 1");
  require(cfg.m0 >= 0 && cfg.m0 <= 1, "m0 must be in [0,1]");
  require(cfg.image_size >= cfg.min_image, "image_size must be >= min_image");
  require(cfg.image_size >= cfg.global_size, "image_size must be >= global_size");
  require(cfg.ckpt_every >= 0, "ckpt_every must be >= 0");
}

AugmentConfig augment_of(const TrainConfig& cfg) {
  AugmentConfig a;
  a.n_global = cfg.n_global;
  a.n_local = cfg.n_local;
  a.global_size = cfg.global_size;
  a.local_size = cfg.local_size;
  a.min_image = cfg.min_image;
  a.global_area_min = cfg.global_area_min;
  a.global_area_max = cfg.global_area_max;
  a.local_area_min = cfg.local_area_min;
  a.local_area_max = cfg.local_area_max;
  a.jitter_strength = cfg.jitter_strength;
  a.p_grayscale = cfg.p_grayscale;
  a.p_blur_global = cfg.p_blur_global;
  a.p_blur_local = cfg.p_blur_local;
  a.p_noise = cfg.p_noise;
  a.blur_sigma_min = cfg.blur_sigma_min;
  a.blur_sigma_max = cfg.blur_sigma_max;
  a.noise_sigma = cfg.noise_sigma;
  return a;
}

ArchConfig arch_of(const TrainConfig& cfg) {
  ArchConfig m;
  m.patch = cfg.patch;
  m.dim = cfg.dim;
  m.depth = cfg.depth;
  m.heads = cfg.heads;
  m.mlp_ratio = cfg.mlp_ratio;
  m.encoder_norm = cfg.encoder_norm;
  m.proj_blocks = cfg.proj_blocks;
  m.pred_blocks = cfg.pred_blocks;
  return m;
}

}  // namespace gtsa
