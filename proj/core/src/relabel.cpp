#include <stdexcept>

#include "bioenc/model.hpp"
#include "bioenc/units.hpp"

namespace bioenc {

Relabeling relabel_from_model(const EncoderModel& model, std::span<const AudioClip> clips, int layer,
                              const KMeansOptions& opts) {
  const int depth = model.config().depth;
  if (layer < 0 || layer >= depth) {
    throw std::invalid_argument("relabel_from_model: layer " + std::to_string(layer) + " outside [0, " +
                                std::to_string(depth) + ")");
  }
  if (clips.empty()) throw DataError("relabel_from_model: no clips");

  std::vector<FrameFeatures> feats;
  feats.reserve(clips.size());
  for (const AudioClip& clip : clips) {
    ForwardOutput out = forward(model, clip, nullptr, true);
    FrameFeatures f;
    f.data = std::move(out.layer_states[static_cast<std::size_t>(layer)]);
    f.frame_rate = model.config().frame_rate();
    f.source_id = clip.source_id;
    feats.push_back(std::move(f));
  }

  const FeatureStats stats = compute_stats(feats);
  for (auto& f : feats) f = standardize(f, stats);

  Relabeling result;
  result.codebook = kmeans_fit(std::span<const FrameFeatures>(feats), opts);
  result.codebook.stage = 2;
  result.codebook.input_stats = stats;
  result.units.reserve(feats.size());
  for (const auto& f : feats) result.units.push_back(assign(result.codebook, f));
  return result;
}

}  // namespace bioenc
