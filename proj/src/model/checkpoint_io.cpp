#include <json.hpp>

#include "kwash/container.hpp"
#include "kwash/error.hpp"
#include "kwash/model.hpp"

namespace kwash::lm {

using nlohmann::json;

namespace {
constexpr const char* kKind = "checkpoint";
}

void save_checkpoint(const ModelCheckpoint& model, const std::filesystem::path& file) {
  const auto& cfg = model.config();
  json meta{{"n_layers", cfg.n_layers}, {"d_model", cfg.d_model},   {"d_mlp", cfg.d_mlp},
            {"n_heads", cfg.n_heads},   {"context", cfg.context},   {"vocab_size", cfg.vocab_size},
            {"vocab", model.vocab().tokens()}};
  container::Contents c;
  c.kind = kKind;
  c.meta_json = meta.dump();
  const auto params = model.params();
  for (const auto& slot : model.layout().slots) {
    c.tensors.push_back({slot.name, slot.rows, slot.cols,
                         std::vector<double>(params.begin() + static_cast<std::ptrdiff_t>(slot.offset),
                                             params.begin() + static_cast<std::ptrdiff_t>(slot.offset + slot.size()))});
  }
  container::write(file, c);
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& file) {
  const auto c = container::read(file);
  if (c.kind != kKind) throw Error(ErrorKind::kFormat, file.string() + " is not a checkpoint");
  ModelConfig cfg;
  std::vector<std::string> tokens;
  try {
    const json meta = json::parse(c.meta_json);
    cfg.n_layers = meta.at("n_layers").get<std::size_t>();
    cfg.d_model = meta.at("d_model").get<std::size_t>();
    cfg.d_mlp = meta.at("d_mlp").get<std::size_t>();
    cfg.n_heads = meta.at("n_heads").get<std::size_t>();
    cfg.context = meta.at("context").get<std::size_t>();
    cfg.vocab_size = meta.at("vocab_size").get<std::size_t>();
    tokens = meta.at("vocab").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("checkpoint header: ") + e.what());
  }
  corpus::Vocabulary vocab(std::move(tokens));
  const Layout layout(cfg);
  std::vector<double> params(layout.total);
  for (const auto& slot : layout.slots) {
    const auto& t = c.tensor(slot.name);
    if (t.rows != slot.rows || t.cols != slot.cols) {
      throw Error(ErrorKind::kFormat, "checkpoint tensor " + slot.name + " has wrong shape");
    }
    std::copy(t.data.begin(), t.data.end(), params.begin() + static_cast<std::ptrdiff_t>(slot.offset));
  }
  return ModelCheckpoint(cfg, std::move(vocab), std::move(params));
}

}  // namespace kwash::lm
