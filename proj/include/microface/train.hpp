#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "microface/optim.hpp"
#include "microface/pipeline.hpp"

namespace microface {

struct Ablation {
  bool disable_dem = false;
  bool disable_dgmd = false;
  bool drop_geo = false;
  bool drop_landmark = false;
  bool drop_motion = false;
  bool drop_lap = false;
  bool drop_normal = false;
  bool drop_flow_guide = false;
};

struct TrainConfig {
  std::string dataset;
  std::string out_dir = "run";
  std::size_t epochs = 40;
  std::size_t batch_size = 4;
  double learning_rate = 1e-4;
  std::uint64_t seed = 0;
  /// Held-out evaluation every this many epochs (and after the last); 0 disables it.
  std::size_t eval_every = 10;
  LossWeights loss_weights;
  ModelConfig model;
  Ablation ablation;

  void validate() const;
  /// Model and loss weights with the ablation switches applied.
  ModelConfig effective_model() const;
  LossWeights effective_weights() const;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
/// Unknown keys are errors; missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
TrainConfig load_train_config(const std::string& path);

/// Trained (or initial) parameters plus what is needed to rebuild the model.
struct Checkpoint {
  ModelConfig model;
  LossWeights loss_weights;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  std::size_t steps = 0;
  std::size_t n_vertices = 0;
  ParameterSet<float> params;
};

/// Writes the JSON manifest at `path` and the concatenated MXT1 records next to it (`<stem>.mxt`).
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// One loaded dataset split.
struct DatasetSplit {
  DatasetManifest manifest;
  FaceModel model;
  std::vector<std::string> names;
  std::vector<SyntheticSequence> sequences;
};

DatasetSplit load_split(const std::string& dir, const std::string& split);

struct SequenceMetrics {
  std::string id;
  double init_rmse = 0;
  double final_rmse = 0;
  double static_rmse = 0;
  double landmark_px = 0;
  double smoothness = 0;
  LossBreakdown loss;

  nlohmann::json to_json() const;
};

struct EvalReport {
  std::string split;
  std::vector<SequenceMetrics> sequences;
  SequenceMetrics aggregate;  // mean over sequences

  nlohmann::json to_json() const;
};

/// sqrt(mean over frames and vertices of |v - v_gt|^2).
double vertex_rmse(const std::vector<Vertices>& pred, const std::vector<Mesh>& gt);
/// Mean over interior frames and vertices of |v_{t+1} - 2 v_t + v_{t-1}|; 0 for fewer than 3 frames.
double temporal_smoothness(const std::vector<Vertices>& meshes);
/// Mean pixel distance between projected landmark vertices of the prediction and of the ground truth.
double landmark_error(const std::vector<Vertices>& pred, const std::vector<Mesh>& gt, const std::vector<int>& indices,
                      const Camera& cam);

/// Metrics for one clip from predicted init and final meshes. Static baseline repeats the onset mesh.
SequenceMetrics sequence_metrics(const std::string& id, const std::vector<Vertices>& init,
                                 const std::vector<Vertices>& final, const Vertices& onset,
                                 const std::vector<Mesh>& gt, const std::vector<int>& landmarks, const Camera& cam);

EvalReport aggregate_report(const std::string& split, std::vector<SequenceMetrics> per_sequence);

/// Full pipeline over a loaded split with the given parameters.
EvalReport evaluate(const ParameterSet<float>& params, const ModelConfig& model, const LossWeights& w,
                    const DatasetSplit& data);
EvalReport evaluate(const Checkpoint& ckpt, const std::string& data_dir, const std::string& split);

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<nlohmann::json> log;
};

/// Adam over the train split. Writes `<out_dir>/checkpoint.json`, `checkpoint.mxt` and `train_log.jsonl`.
/// `progress` receives one human-readable line per epoch.
TrainResult train(const TrainConfig& cfg, std::ostream* progress = nullptr);

struct InferOptions {
  std::string model_dir;  // defaults to <seq>/../model
  bool disable_dgmd = false;
};

/// Writes mesh_<t>_init.obj, mesh_<t>_final.obj and attention_<t>.json for t = 1..T. Returns T.
std::size_t infer(const Checkpoint& ckpt, const std::string& seq_dir, const std::string& out_dir,
                  const InferOptions& options = {});

}  // namespace microface
