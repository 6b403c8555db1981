#pragma once

// Checkpoint layouts for the denoiser (+ adapter namespace), distillation
// sessions, and on-disk datasets.

#include <string>

#include "esm/dataset.hpp"
#include "esm/denoiser.hpp"
#include "esm/distill.hpp"
#include "esm/io.hpp"
#include "esm/lora.hpp"

namespace esm {

inline json schedule_json(const NoiseSchedule& sched) {
  return {{"steps", sched.steps()}, {"beta_start", sched.beta_start()}, {"beta_end", sched.beta_end()},
          {"kind", "linear"}};
}

inline NoiseSchedule schedule_from_json(const json& j) {
  return build_schedule(j.at("steps").get<int>(), j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

inline json denoiser_spec_json(const DenoiserSpec& s) {
  return {{"side", s.side}, {"num_classes", s.num_classes}, {"hidden", s.hidden}, {"depth", s.depth},
          {"temb_dim", s.temb_dim}};
}

inline DenoiserSpec denoiser_spec_from_json(const json& j) {
  DenoiserSpec s;
  s.side = j.at("side").get<int>();
  s.num_classes = j.at("num_classes").get<int>();
  s.hidden = j.at("hidden").get<int>();
  s.depth = j.at("depth").get<int>();
  s.temb_dim = j.at("temb_dim").get<int>();
  return s;
}

template <typename T>
Checkpoint denoiser_checkpoint(const DenoiserModel<T>& model, const NoiseSchedule& sched,
                               const std::vector<std::string>& class_names, const json& extra = json::object()) {
  Checkpoint ckpt;
  ckpt.kind = "denoiser";
  ckpt.meta = extra;
  ckpt.meta["model"] = denoiser_spec_json(model.spec());
  ckpt.meta["schedule"] = schedule_json(sched);
  ckpt.meta["class_names"] = class_names;
  ckpt.add_store(model.params());
  return ckpt;
}

struct LoadedDenoiser {
  DenoiserModel<float> model;
  NoiseSchedule schedule;
  std::vector<std::string> class_names;
  json meta;
};

inline LoadedDenoiser load_denoiser(const fs::path& dir) {
  const Checkpoint ckpt = read_checkpoint(dir);
  if (ckpt.kind != "denoiser") throw IoError("'" + dir.string() + "' is a " + ckpt.kind + " checkpoint, not a denoiser");
  const DenoiserSpec spec = denoiser_spec_from_json(ckpt.meta.at("model"));
  ParamStore<float> params;
  for (const auto& [name, t] : ckpt.tensors)
    if (name.rfind("lora/", 0) != 0) params.add(name, t);
  return {DenoiserModel<float>(spec, std::move(params)), schedule_from_json(ckpt.meta.at("schedule")),
          ckpt.meta.value("class_names", std::vector<std::string>{}), ckpt.meta};
}

/// Adds adapter factors (already named lora/<op>/A|B) and their metadata.
template <typename T>
void append_adapter(Checkpoint& ckpt, const LoraAdapter<T>& adapter) {
  ckpt.add_store(adapter.params());
  ckpt.meta["lora"] = {{"rank", adapter.factors.rank},
                       {"scale", double(adapter.factors.scale)},
                       {"op_indices", adapter.factors.op_indices}};
}

template <typename T>
LoraAdapter<T> adapter_from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("lora")) throw IoError("checkpoint carries no adapter");
  const json& m = ckpt.meta.at("lora");
  LoraAdapter<T> adapter;
  adapter.factors.rank = m.at("rank").get<int>();
  adapter.factors.scale = T(m.at("scale").get<double>());
  adapter.factors.op_indices = m.at("op_indices").get<std::vector<std::size_t>>();
  for (std::size_t op : adapter.factors.op_indices) {
    adapter.factors.params.add(LowRankSet<T>::a_name(op), ckpt.at(LowRankSet<T>::a_name(op)).template cast<T>());
    adapter.factors.params.add(LowRankSet<T>::b_name(op), ckpt.at(LowRankSet<T>::b_name(op)).template cast<T>());
  }
  return adapter;
}

namespace detail {

template <typename T>
void add_adam(Checkpoint& ckpt, const std::string& prefix, const ParamStore<T>& store, const AdamState<T>& opt) {
  ckpt.meta[prefix + "step"] = opt.step;
  if (opt.m.empty()) return;
  for (std::size_t k = 0; k < store.entries().size(); ++k) {
    ckpt.add(prefix + "m/" + store.entries()[k].name, opt.m[k]);
    ckpt.add(prefix + "v/" + store.entries()[k].name, opt.v[k]);
  }
}

template <typename T>
AdamState<T> read_adam(const Checkpoint& ckpt, const std::string& prefix, const ParamStore<T>& store) {
  AdamState<T> opt;
  opt.step = ckpt.meta.value(prefix + "step", 0L);
  if (!ckpt.contains(prefix + "m/" + store.entries().front().name)) return opt;
  for (const auto& e : store.entries()) {
    opt.m.push_back(ckpt.at(prefix + "m/" + e.name).template cast<T>());
    opt.v.push_back(ckpt.at(prefix + "v/" + e.name).template cast<T>());
  }
  return opt;
}

}  // namespace detail

/// Full distillation state: scene, its optimizer moments, adapter and the next iteration index.
template <typename T>
Checkpoint session_checkpoint(const DistillSession<T>& session, const json& extra = json::object()) {
  Checkpoint ckpt;
  ckpt.kind = "scene";
  ckpt.meta = extra;
  ckpt.meta["iteration"] = session.iteration;
  ckpt.meta["num_splats"] = session.scene.count();
  ckpt.meta["channels"] = session.scene.channels();
  ckpt.add_store(session.scene.params, "scene/");
  detail::add_adam(ckpt, "scene_adam/", session.scene.params, session.scene_opt);
  if (session.adapter) {
    append_adapter(ckpt, *session.adapter);
    detail::add_adam(ckpt, "lora_adam/", session.adapter->params(), session.adapter->opt);
  }
  return ckpt;
}

template <typename T>
DistillSession<T> session_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "scene") throw IoError("expected a scene checkpoint, found '" + ckpt.kind + "'");
  DistillSession<T> session;
  session.scene.params = ckpt.store<T>("scene/");
  for (const char* key : {SplatScene<T>::kCenter, SplatScene<T>::kLogScale, SplatScene<T>::kAngle,
                          SplatScene<T>::kColor, SplatScene<T>::kOpacity})
    if (!session.scene.params.contains(key)) throw IoError(std::string("scene checkpoint lacks '") + key + "'");
  session.scene_opt = detail::read_adam(ckpt, "scene_adam/", session.scene.params);
  session.iteration = ckpt.meta.at("iteration").get<int>();
  if (ckpt.meta.contains("lora")) {
    session.adapter = adapter_from_checkpoint<T>(ckpt);
    session.adapter->opt = detail::read_adam(ckpt, "lora_adam/", session.adapter->params());
  }
  return session;
}

/// Dataset file: "images" [N, side, side] in pixel units, "labels" [N].
template <typename T>
Checkpoint dataset_checkpoint(const Dataset<T>& ds) {
  require(ds.size() > 0, "dataset_checkpoint: empty dataset");
  const std::size_t side = std::size_t(ds.side), n = ds.size();
  Tensor<float> images({n, side, side});
  Tensor<float> labels({n});
  for (std::size_t k = 0; k < n; ++k) {
    const auto px = from_latent(ds.images[k]);
    for (std::size_t i = 0; i < side * side; ++i) images[k * side * side + i] = float(px[i]);
    labels[k] = float(ds.labels[k]);
  }
  Checkpoint ckpt;
  ckpt.kind = "dataset";
  ckpt.meta = {{"num_classes", ds.num_classes}, {"class_names", ds.class_names}, {"side", ds.side}};
  ckpt.add("images", images);
  ckpt.add("labels", labels);
  return ckpt;
}

template <typename T>
Dataset<T> dataset_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.kind != "dataset") throw IoError("expected a dataset checkpoint, found '" + ckpt.kind + "'");
  const auto& images = ckpt.at("images");
  const auto& labels = ckpt.at("labels");
  if (images.shape().size() != 3 || images.shape()[1] != images.shape()[2] || labels.size() != images.shape()[0])
    throw IoError("dataset tensors have inconsistent shapes");
  Dataset<T> ds;
  ds.side = int(images.shape()[1]);
  ds.num_classes = ckpt.meta.at("num_classes").get<int>();
  ds.class_names = ckpt.meta.value("class_names", std::vector<std::string>{});
  const std::size_t side = std::size_t(ds.side);
  for (std::size_t k = 0; k < labels.size(); ++k) {
    Tensor<T> px({side, side});
    for (std::size_t i = 0; i < side * side; ++i) px[i] = T(images[k * side * side + i]);
    const int label = int(std::lround(labels[k]));
    if (label < 0 || label >= ds.num_classes) throw IoError("dataset label out of range");
    ds.images.push_back(to_latent(px));
    ds.labels.push_back(label);
  }
  return ds;
}

}  // namespace esm
