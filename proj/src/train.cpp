#include "microface/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>

namespace microface {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kCheckpointFormat = "microface-checkpoint-1";
constexpr const char* kReportNote =
    "Synthetic-data geometric metrics (vertex RMSE, landmark pixel error, temporal smoothness) stand in for "
    "recognition accuracy and rendering metrics; the reconstruction term is a landmark/regularization/vertex "
    "surrogate rather than a photometric loss.";

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path + ": malformed JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path.string() + ": cannot write");
  out << text;
  if (!out) throw IoError(path.string() + ": write failed");
}

json weights_to_json(const LossWeights& w) {
  return json{{"geo", w.geo},         {"lap", w.lap}, {"normal", w.normal}, {"flow_guide", w.flow_guide},
              {"flow", w.flow},       {"lmk", w.lmk}, {"reg", w.reg},       {"vtx", w.vtx}};
}

void weights_from_json(const json& j, LossWeights& w) {
  if (!j.is_object()) throw Error("loss_weights must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    double* slot = key == "geo"          ? &w.geo
                   : key == "lap"        ? &w.lap
                   : key == "normal"     ? &w.normal
                   : key == "flow_guide" ? &w.flow_guide
                   : key == "flow"       ? &w.flow
                   : key == "lmk"        ? &w.lmk
                   : key == "reg"        ? &w.reg
                   : key == "vtx"        ? &w.vtx
                                         : nullptr;
    if (!slot) throw Error("unknown loss weight '" + key + "'");
    if (!v.is_number()) throw Error("loss weight '" + key + "' must be a number");
    *slot = v.get<double>();
  }
  w.validate();
}

json ablation_to_json(const Ablation& a) {
  return json{{"disable_dem", a.disable_dem},     {"disable_dgmd", a.disable_dgmd}, {"drop_geo", a.drop_geo},
              {"drop_landmark", a.drop_landmark}, {"drop_motion", a.drop_motion},   {"drop_lap", a.drop_lap},
              {"drop_normal", a.drop_normal},     {"drop_flow_guide", a.drop_flow_guide}};
}

void ablation_from_json(const json& j, Ablation& a) {
  if (!j.is_object()) throw Error("ablation must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    bool* slot = key == "disable_dem"       ? &a.disable_dem
                 : key == "disable_dgmd"    ? &a.disable_dgmd
                 : key == "drop_geo"        ? &a.drop_geo
                 : key == "drop_landmark"   ? &a.drop_landmark
                 : key == "drop_motion"     ? &a.drop_motion
                 : key == "drop_lap"        ? &a.drop_lap
                 : key == "drop_normal"     ? &a.drop_normal
                 : key == "drop_flow_guide" ? &a.drop_flow_guide
                                            : nullptr;
    if (!slot) throw Error("unknown ablation switch '" + key + "'");
    if (!v.is_boolean()) throw Error("ablation switch '" + key + "' must be true or false");
    *slot = v.get<bool>();
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (batch_size == 0) throw Error("batch_size must be positive");
  if (!(learning_rate > 0) || !std::isfinite(learning_rate)) throw Error("learning_rate must be positive");
  loss_weights.validate();
  model.validate();
}

ModelConfig TrainConfig::effective_model() const {
  ModelConfig m = model;
  m.disable_dem = m.disable_dem || ablation.disable_dem;
  m.disable_dgmd = m.disable_dgmd || ablation.disable_dgmd;
  m.local.use_geo = m.local.use_geo && !ablation.drop_geo;
  m.local.use_landmark = m.local.use_landmark && !ablation.drop_landmark;
  m.local.use_motion = m.local.use_motion && !ablation.drop_motion;
  return m;
}

LossWeights TrainConfig::effective_weights() const {
  LossWeights w = loss_weights;
  if (ablation.drop_lap) w.lap = 0;
  if (ablation.drop_normal) w.normal = 0;
  if (ablation.drop_flow_guide) w.flow_guide = 0;
  return w;
}

json train_config_to_json(const TrainConfig& c) {
  return json{{"dataset", c.dataset},
              {"out_dir", c.out_dir},
              {"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"learning_rate", c.learning_rate},
              {"seed", c.seed},
              {"eval_every", c.eval_every},
              {"loss_weights", weights_to_json(c.loss_weights)},
              {"model", model_config_to_json(c.model)},
              {"ablation", ablation_to_json(c.ablation)}};
}

TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw Error("train config must be a JSON object");
  TrainConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "dataset") c.dataset = v.get<std::string>();
      else if (key == "out_dir") c.out_dir = v.get<std::string>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "eval_every") c.eval_every = v.get<std::size_t>();
      else if (key == "loss_weights") weights_from_json(v, c.loss_weights);
      else if (key == "model") model_config_from_json(v, c.model);
      else if (key == "ablation") ablation_from_json(v, c.ablation);
      else throw Error("unknown train config key '" + key + "'");
    } catch (const json::exception& e) {
      throw Error("train config key '" + key + "': " + e.what());
    }
  }
  if (c.dataset.empty()) throw Error("train config needs a 'dataset' path");
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::string& path) {
  const json j = read_json(path);
  try {
    return train_config_from_json(j);
  } catch (const Error& e) {
    throw Error(path + ": " + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const fs::path manifest(path);
  if (manifest.has_parent_path()) fs::create_directories(manifest.parent_path());
  const fs::path blob = manifest.parent_path() / (manifest.stem().string() + ".mxt");
  json tensors = json::array();
  {
    std::ofstream out(blob, std::ios::binary);
    if (!out) throw IoError(blob.string() + ": cannot write");
    for (const auto& [name, t] : ckpt.params.items()) {
      write_mxt(out, t);
      tensors.push_back(json{{"name", name}, {"shape", t.shape()}});
    }
    if (!out) throw IoError(blob.string() + ": write failed");
  }
  const json j{{"format", kCheckpointFormat},
               {"blob", blob.filename().string()},
               {"tensors", tensors},
               {"model", model_config_to_json(ckpt.model)},
               {"loss_weights", weights_to_json(ckpt.loss_weights)},
               {"seed", ckpt.seed},
               {"epochs", ckpt.epochs},
               {"steps", ckpt.steps},
               {"n_vertices", ckpt.n_vertices}};
  write_text(manifest, j.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& path) {
  const json j = read_json(path);
  Checkpoint c;
  std::vector<std::pair<std::string, Shape>> entries;
  std::string blob_name;
  try {
    if (j.value("format", "") != kCheckpointFormat) throw IoError(path + ": not a checkpoint manifest");
    model_config_from_json(j.at("model"), c.model);
    weights_from_json(j.at("loss_weights"), c.loss_weights);
    c.seed = j.at("seed").get<std::uint64_t>();
    c.epochs = j.at("epochs").get<std::size_t>();
    c.steps = j.at("steps").get<std::size_t>();
    c.n_vertices = j.at("n_vertices").get<std::size_t>();
    blob_name = j.at("blob").get<std::string>();
    for (const auto& t : j.at("tensors")) entries.emplace_back(t.at("name").get<std::string>(), t.at("shape").get<Shape>());
  } catch (const json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
  const fs::path blob = fs::path(path).parent_path() / blob_name;
  if (!fs::exists(blob)) throw IoError(blob.string() + ": missing");
  auto tensors = load_mxt_all(blob.string());
  if (tensors.size() != entries.size())
    throw IoError(blob.string() + ": holds " + std::to_string(tensors.size()) + " tensors, manifest lists " +
                  std::to_string(entries.size()));
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (tensors[i].shape() != entries[i].second)
      throw IoError(blob.string() + ": tensor '" + entries[i].first + "' has shape " + shape_string(tensors[i].shape()) +
                    ", manifest says " + shape_string(entries[i].second));
    c.params.add(entries[i].first, std::move(tensors[i]));
  }
  // The manifest must describe exactly the parameters this configuration builds.
  ParameterSet<float> fresh;
  init_parameters(fresh, c.model, 0);
  for (const auto& [name, t] : fresh.items()) {
    if (!c.params.contains(name)) throw IoError(path + ": missing parameter '" + name + "'");
    if (c.params.get(name).shape() != t.shape())
      throw IoError(path + ": parameter '" + name + "' has shape " + shape_string(c.params.get(name).shape()) +
                    ", the configured model needs " + shape_string(t.shape()));
  }
  if (fresh.size() != c.params.size()) throw IoError(path + ": unexpected extra parameters");
  return c;
}

DatasetSplit load_split(const std::string& dir, const std::string& split) {
  DatasetSplit d;
  d.manifest = read_manifest(dir);
  d.model = load_model((fs::path(dir) / "model").string());
  d.names = d.manifest.split(split);
  for (const auto& name : d.names) d.sequences.push_back(read_sequence((fs::path(dir) / name).string()));
  return d;
}

json SequenceMetrics::to_json() const {
  return json{{"id", id},
              {"init_rmse", init_rmse},
              {"final_rmse", final_rmse},
              {"static_rmse", static_rmse},
              {"landmark_px", landmark_px},
              {"smoothness", smoothness},
              {"loss", loss.to_json()}};
}

json EvalReport::to_json() const {
  json seqs = json::array();
  for (const auto& s : sequences) seqs.push_back(s.to_json());
  json agg = aggregate.to_json();
  agg.erase("id");
  return json{{"split", split}, {"count", sequences.size()}, {"note", kReportNote}, {"aggregate", agg},
              {"sequences", seqs}};
}

double vertex_rmse(const std::vector<Vertices>& pred, const std::vector<Mesh>& gt) {
  if (pred.size() != gt.size() || pred.empty()) throw ShapeError("vertex_rmse: frame counts differ or are zero");
  double acc = 0;
  std::size_t count = 0;
  for (std::size_t t = 0; t < pred.size(); ++t) {
    if (pred[t].rows() != gt[t].vertices.rows()) throw ShapeError("vertex_rmse: vertex counts differ");
    acc += (pred[t] - gt[t].vertices).squaredNorm();
    count += static_cast<std::size_t>(pred[t].rows());
  }
  return std::sqrt(acc / static_cast<double>(count));
}

double temporal_smoothness(const std::vector<Vertices>& m) {
  if (m.size() < 3) return 0;
  double acc = 0;
  std::size_t count = 0;
  for (std::size_t t = 1; t + 1 < m.size(); ++t) {
    const Vertices a = m[t + 1] - 2 * m[t] + m[t - 1];
    acc += a.rowwise().norm().sum();
    count += static_cast<std::size_t>(a.rows());
  }
  return acc / static_cast<double>(count);
}

double landmark_error(const std::vector<Vertices>& pred, const std::vector<Mesh>& gt, const std::vector<int>& idx,
                      const Camera& cam) {
  if (pred.size() != gt.size() || pred.empty() || idx.empty()) throw ShapeError("landmark_error: empty input");
  double acc = 0;
  for (std::size_t t = 0; t < pred.size(); ++t)
    for (int i : idx) acc += (project(pred[t].row(i).transpose(), cam) - project(gt[t].vertices.row(i).transpose(), cam)).norm();
  return acc / static_cast<double>(pred.size() * idx.size());
}

SequenceMetrics sequence_metrics(const std::string& id, const std::vector<Vertices>& init,
                                 const std::vector<Vertices>& final, const Vertices& onset,
                                 const std::vector<Mesh>& gt, const std::vector<int>& landmarks, const Camera& cam) {
  SequenceMetrics m;
  m.id = id;
  m.init_rmse = vertex_rmse(init, gt);
  m.final_rmse = vertex_rmse(final, gt);
  m.static_rmse = vertex_rmse(std::vector<Vertices>(gt.size(), onset), gt);
  m.landmark_px = landmark_error(final, gt, landmarks, cam);
  m.smoothness = temporal_smoothness(final);
  return m;
}

EvalReport aggregate_report(const std::string& split, std::vector<SequenceMetrics> per) {
  EvalReport r;
  r.split = split;
  r.sequences = std::move(per);
  r.aggregate.id = "mean";
  if (r.sequences.empty()) return r;
  for (const auto& s : r.sequences) {
    r.aggregate.init_rmse += s.init_rmse;
    r.aggregate.final_rmse += s.final_rmse;
    r.aggregate.static_rmse += s.static_rmse;
    r.aggregate.landmark_px += s.landmark_px;
    r.aggregate.smoothness += s.smoothness;
    r.aggregate.loss += s.loss;
  }
  const double k = 1.0 / static_cast<double>(r.sequences.size());
  r.aggregate.init_rmse *= k;
  r.aggregate.final_rmse *= k;
  r.aggregate.static_rmse *= k;
  r.aggregate.landmark_px *= k;
  r.aggregate.smoothness *= k;
  r.aggregate.loss = r.aggregate.loss.scaled(k);
  for (double v : {r.aggregate.init_rmse, r.aggregate.final_rmse, r.aggregate.static_rmse, r.aggregate.landmark_px,
                   r.aggregate.smoothness, r.aggregate.loss.total})
    if (!std::isfinite(v)) throw NumericError("evaluation produced a non-finite metric");
  return r;
}

EvalReport evaluate(const ParameterSet<float>& params, const ModelConfig& model, const LossWeights& w,
                    const DatasetSplit& data) {
  const ModelContext ctx(data.model);
  std::vector<SequenceMetrics> per;
  for (std::size_t s = 0; s < data.sequences.size(); ++s) {
    const auto& seq = data.sequences[s];
    Graph<float> g(&params);
    const auto in = sequence_input(seq);
    const auto res = run_sequence(g, ctx, model, in, w);
    std::vector<Vertices> init, final;
    for (const auto& f : res.frames) {
      init.push_back(to_vertices(f.init.value()));
      final.push_back(to_vertices(f.final.value()));
    }
    auto m = sequence_metrics(data.names[s], init, final, blendshape_forward(data.model, in.onset).vertices,
                              seq.meshes, ctx.landmarks, seq.camera);
    m.loss = breakdown(res);
    per.push_back(std::move(m));
  }
  return aggregate_report("", std::move(per));
}

EvalReport evaluate(const Checkpoint& ckpt, const std::string& data_dir, const std::string& split) {
  const auto data = load_split(data_dir, split);
  if (data.model.vertex_count() != ckpt.n_vertices)
    throw ShapeError("checkpoint was trained on " + std::to_string(ckpt.n_vertices) + " vertices, dataset model has " +
                     std::to_string(data.model.vertex_count()));
  if (data.model.expression_count() != ckpt.model.dem.n_expression)
    throw ShapeError("checkpoint expects " + std::to_string(ckpt.model.dem.n_expression) +
                     " expression coefficients, dataset model has " + std::to_string(data.model.expression_count()));
  auto r = evaluate(ckpt.params, ckpt.model, ckpt.loss_weights, data);
  r.split = split;
  return r;
}

TrainResult train(const TrainConfig& cfg, std::ostream* progress) {
  cfg.validate();
  const ModelConfig model_cfg = cfg.effective_model();
  const LossWeights w = cfg.effective_weights();
  if (!fs::exists(fs::path(cfg.dataset) / "manifest.json"))
    throw IoError(cfg.dataset + ": dataset missing (no manifest.json)");
  const auto train_data = load_split(cfg.dataset, "train");
  if (train_data.sequences.empty()) throw Error(cfg.dataset + ": train split is empty");
  std::optional<DatasetSplit> test_data;
  if (cfg.eval_every > 0 && cfg.epochs > 0) {
    test_data = load_split(cfg.dataset, "test");
    if (test_data->sequences.empty()) test_data.reset();
  }
  if (train_data.model.expression_count() != model_cfg.dem.n_expression)
    throw ShapeError("dataset model has " + std::to_string(train_data.model.expression_count()) +
                     " expression coefficients, config expects " + std::to_string(model_cfg.dem.n_expression));

  TrainResult result;
  Checkpoint& ckpt = result.checkpoint;
  ckpt.model = model_cfg;
  ckpt.loss_weights = w;
  ckpt.seed = cfg.seed;
  ckpt.n_vertices = train_data.model.vertex_count();
  init_parameters(ckpt.params, model_cfg, cfg.seed);

  const ModelContext ctx(train_data.model);
  std::vector<SequenceInput> inputs;
  for (const auto& s : train_data.sequences) inputs.push_back(sequence_input(s));

  AdamState<float> adam;
  adam.hyper.learning_rate = cfg.learning_rate;
  std::vector<std::size_t> order(inputs.size());
  const fs::path out_dir(cfg.out_dir);
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "train_log.jsonl", std::ios::binary | std::ios::trunc);
  if (!log) throw IoError((out_dir / "train_log.jsonl").string() + ": cannot write");

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(cfg.seed, 0x5eed0000ULL + epoch));
    std::shuffle(order.begin(), order.end(), rng);
    LossBreakdown epoch_loss;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      GradientMap<float> acc;
      const float k = 1.0f / static_cast<float>(e - b);
      for (std::size_t i = b; i < e; ++i) {
        const std::size_t idx = order[i];
        Graph<float> g(&ckpt.params);
        try {
          auto res = run_sequence(g, ctx, model_cfg, inputs[idx], w);
          if (!std::isfinite(res.loss.value().item())) throw NumericError("loss is not finite");
          g.backward(res.loss);
          epoch_loss += breakdown(res);
        } catch (const NumericError& err) {
          throw NumericError("epoch " + std::to_string(epoch) + ", step " + std::to_string(ckpt.steps + 1) +
                             ", sequence " + train_data.names[idx] + ": " + err.what());
        }
        for (auto& [name, grad] : g.parameter_grads()) {
          auto it = acc.find(name);
          if (it == acc.end()) it = acc.emplace(name, Tensor<float>(grad.shape())).first;
          for (std::size_t j = 0; j < grad.size(); ++j) it->second[j] += k * grad[j];
        }
      }
      adam_update(ckpt.params, acc, adam);
      ++ckpt.steps;
      ++batches;
    }
    ckpt.epochs = epoch;
    json line{{"epoch", epoch},
              {"steps", ckpt.steps},
              {"batches", batches},
              {"train", epoch_loss.scaled(1.0 / static_cast<double>(inputs.size())).to_json()}};
    if (test_data && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs)) {
      const auto rep = evaluate(ckpt.params, model_cfg, w, *test_data);
      json agg = rep.aggregate.to_json();
      agg.erase("id");
      line["test"] = agg;
    }
    log << line.dump() << "\n";
    log.flush();
    result.log.push_back(line);
    if (progress) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      *progress << "epoch " << epoch << "/" << cfg.epochs << " loss " << std::setprecision(6)
                << line["train"]["total"].get<double>();
      if (line.contains("test"))
        *progress << " test init_rmse " << line["test"]["init_rmse"].get<double>() << " final_rmse "
                  << line["test"]["final_rmse"].get<double>();
      *progress << " (" << std::setprecision(3) << secs << " s)" << std::endl;
    }
  }
  save_checkpoint(ckpt, (out_dir / "checkpoint.json").string());
  return result;
}

std::size_t infer(const Checkpoint& ckpt, const std::string& seq_dir, const std::string& out_dir,
                  const InferOptions& options) {
  const fs::path root(seq_dir);
  if (!fs::is_directory(root)) throw IoError(seq_dir + ": sequence directory does not exist");
  std::vector<std::string> missing;
  for (const char* f : {"camera.json", "params.json", "landmarks.json"})
    if (!fs::exists(root / f)) missing.push_back((root / f).string());
  if (fs::exists(root / "params.json")) {
    const json pj = read_json((root / "params.json").string());
    const std::size_t T = pj.value("frames", std::size_t{0});
    for (std::size_t t = 1; t < T; ++t) {
      const auto p = root / ("flow_" + std::to_string(t) + ".mxt");
      if (!fs::exists(p)) missing.push_back(p.string());
    }
  }
  if (!missing.empty()) {
    std::string msg = "missing inputs:";
    for (const auto& m : missing) msg += " " + m;
    throw IoError(msg);
  }
  const std::string model_dir = options.model_dir.empty() ? (root.parent_path() / "model").string() : options.model_dir;
  if (!fs::is_directory(model_dir)) throw IoError(model_dir + ": face model directory does not exist");
  const FaceModel model = load_model(model_dir);
  if (model.vertex_count() != ckpt.n_vertices)
    throw ShapeError("checkpoint was trained on " + std::to_string(ckpt.n_vertices) + " vertices, face model has " +
                     std::to_string(model.vertex_count()));

  const auto seq = read_sequence(seq_dir, false);
  ModelConfig cfg = ckpt.model;
  cfg.disable_dgmd = cfg.disable_dgmd || options.disable_dgmd;
  const ModelContext ctx(model);
  Graph<float> g(&ckpt.params);
  const auto res = run_sequence(g, ctx, cfg, sequence_input(seq), ckpt.loss_weights);

  fs::create_directories(out_dir);
  for (std::size_t t = 0; t < res.frames.size(); ++t) {
    const std::string k = std::to_string(t + 1);
    write_obj((fs::path(out_dir) / ("mesh_" + k + "_init.obj")).string(),
              Mesh{to_vertices(res.frames[t].init.value()), model.faces});
    write_obj((fs::path(out_dir) / ("mesh_" + k + "_final.obj")).string(),
              Mesh{to_vertices(res.frames[t].final.value()), model.faces});
    json a = attention_to_json(res.geometry[t].attention);
    a["frame"] = t + 1;
    write_text(fs::path(out_dir) / ("attention_" + k + ".json"), a.dump(2) + "\n");
  }
  return res.frames.size();
}

}  // namespace microface
