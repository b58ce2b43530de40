#include "dnpo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

#include <json.hpp>

namespace dnpo {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'D', 'N', 'P', 'O', 'C', 'K', 'P', 'T'};
constexpr uint32_t kFormatVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw std::runtime_error(std::string("checkpoint: truncated while reading ") + what);
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
};

json config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"hidden_dim", c.hidden_dim},
          {"num_blocks", c.num_blocks},
          {"num_heads", c.num_heads},
          {"max_seq_len", c.max_seq_len}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.num_blocks = j.at("num_blocks").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.validate();
  return c;
}

// The canonical array order: model entries, noise entries, then the
// optimizer accumulators in the same sequence.
std::vector<std::pair<std::string, const Mat*>> array_table(const IterationCheckpoint& c) {
  std::vector<std::pair<std::string, const Mat*>> t;
  for (auto& [name, m] : c.model.entries()) t.emplace_back("model." + name, m);
  if (c.noise)
    for (auto& [name, m] : c.noise->entries()) t.emplace_back("noise." + name, m);
  for (size_t i = 0; i < c.opt.model_acc.size(); ++i)
    t.emplace_back("opt.model_acc." + c.model.entries()[i].first, &c.opt.model_acc[i]);
  if (c.noise)
    for (size_t i = 0; i < c.opt.noise_acc.size(); ++i)
      t.emplace_back("opt.noise_acc." + c.noise->entries()[i].first, &c.opt.noise_acc[i]);
  return t;
}

std::vector<std::pair<std::string, Mat*>> array_table_mut(IterationCheckpoint& c) {
  std::vector<std::pair<std::string, Mat*>> t;
  for (auto& [name, m] : c.model.entries()) t.emplace_back("model." + name, m);
  if (c.noise)
    for (auto& [name, m] : c.noise->entries()) t.emplace_back("noise." + name, m);
  for (size_t i = 0; i < c.opt.model_acc.size(); ++i)
    t.emplace_back("opt.model_acc." + c.model.entries()[i].first, &c.opt.model_acc[i]);
  if (c.noise)
    for (size_t i = 0; i < c.opt.noise_acc.size(); ++i)
      t.emplace_back("opt.noise_acc." + c.noise->entries()[i].first, &c.opt.noise_acc[i]);
  return t;
}

}  // namespace

void save_checkpoint(const std::string& path, const IterationCheckpoint& ckpt) {
  ckpt.model.config.validate();
  if (ckpt.opt.model_acc.size() != ckpt.model.entries().size())
    throw std::invalid_argument("checkpoint: optimizer does not match model layout");
  if (ckpt.noise && ckpt.opt.noise_acc.size() != ckpt.noise->entries().size())
    throw std::invalid_argument("checkpoint: optimizer does not match noise head layout");

  auto arrays = array_table(ckpt);
  json header;
  header["format_version"] = kFormatVersion;
  header["iteration"] = ckpt.iteration;
  header["model_config"] = config_json(ckpt.model.config);
  header["rng_state"] = ckpt.rng_state;
  header["config_digest"] = ckpt.config_digest;
  header["optimizer"] = {{"learning_rate", ckpt.opt.learning_rate},
                         {"rho", ckpt.opt.rho},
                         {"eps", ckpt.opt.eps},
                         {"step", ckpt.opt.step}};
  json names = json::array();
  json shapes = json::array();
  for (auto& [name, m] : arrays) {
    names.push_back(name);
    shapes.push_back({m->rows, m->cols});
  }
  header["array_names"] = names;
  header["array_shapes"] = shapes;

  std::string body;
  body.append(kMagic, sizeof kMagic);
  put_u32(body, kFormatVersion);
  std::string head = header.dump();
  put_u64(body, head.size());
  body += head;
  for (auto& [name, m] : arrays) {
    (void)name;
    for (double v : m->data) put_f64(body, v);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw std::runtime_error("checkpoint: short write to " + path);
}

IterationCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  Reader r{buf};
  r.need(sizeof kMagic, "magic");
  if (std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  r.pos = sizeof kMagic;
  uint32_t version = r.u32("version");
  if (version != kFormatVersion)
    throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  uint64_t head_len = r.u64("header length");
  r.need(head_len, "header");
  json header = json::parse(buf.substr(r.pos, head_len));
  r.pos += head_len;

  IterationCheckpoint c;
  c.iteration = header.at("iteration").get<int>();
  c.rng_state = header.at("rng_state").get<uint64_t>();
  c.config_digest = header.at("config_digest").get<uint64_t>();
  ModelConfig mc = config_from_json(header.at("model_config"));
  c.model = init_params(mc, 0);

  const auto& names = header.at("array_names");
  const auto& shapes = header.at("array_shapes");
  if (names.size() != shapes.size())
    throw std::runtime_error("checkpoint: array name/shape tables disagree");
  bool has_noise = false;
  for (const auto& n : names)
    if (n.get<std::string>().rfind("noise.", 0) == 0) has_noise = true;
  if (has_noise) {
    c.noise = init_noise_params(mc, 0);
    c.opt = init_optimizer(c.model, *c.noise, 0.0);
  } else {
    c.opt = init_optimizer(c.model, 0.0);
  }
  c.opt.learning_rate = header.at("optimizer").at("learning_rate").get<double>();
  c.opt.rho = header.at("optimizer").at("rho").get<double>();
  c.opt.eps = header.at("optimizer").at("eps").get<double>();
  c.opt.step = header.at("optimizer").at("step").get<long long>();

  auto table = array_table_mut(c);
  if (table.size() != names.size())
    throw std::runtime_error("checkpoint: array table size mismatch");
  for (size_t i = 0; i < table.size(); ++i) {
    if (names[i].get<std::string>() != table[i].first)
      throw std::runtime_error("checkpoint: unexpected array " + names[i].get<std::string>() +
                               ", wanted " + table[i].first);
    int rows = shapes[i][0].get<int>();
    int cols = shapes[i][1].get<int>();
    Mat* m = table[i].second;
    if (rows != m->rows || cols != m->cols)
      throw std::runtime_error("checkpoint: shape mismatch for " + table[i].first);
    for (auto& v : m->data) v = r.f64(table[i].first.c_str());
  }
  if (r.pos != buf.size()) throw std::runtime_error("checkpoint: trailing bytes in " + path);
  return c;
}

}  // namespace dnpo
