#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "crisp/matrix.hpp"

namespace crisp {

// One annotated instance: a track with a binary mask per frame (row-major
// H*W pixels each). Masks are amodal, so overlapping instances keep their
// full shapes.
struct Instance {
    std::size_t track_id = 0;
    std::size_t category = 0;
    std::vector<std::vector<std::uint8_t>> masks;
};

struct SyntheticVideo {
    std::size_t video_id = 0;
    std::size_t frames = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<Matrix> pixel_features;  // per frame, (H*W) x d
    std::vector<Instance> instances;
};

struct GeneratorConfig {
    std::size_t num_categories = 8;
    std::size_t videos_per_category = 10;
    std::size_t frames_per_video = 2;
    std::size_t grid = 12;  // height = width
    std::size_t blob_min = 2;
    std::size_t blob_max = 4;
    std::size_t motion_step = 1;
    double noise_amplitude = 0.1;
    std::size_t feature_dim = 16;
    std::uint64_t seed = 1;
};

struct Dataset {
    std::vector<SyntheticVideo> train;
    std::vector<SyntheticVideo> val;
};

// Renders 1-3 moving blobs per video for the given categories. Each video's
// primary instance has the video's own category; distractors are drawn from
// the same class set. Deterministic in the config seed; video ids are unique
// across disjoint class sets.
Dataset generate_dataset(const GeneratorConfig& config,
                         const std::vector<std::size_t>& class_set);

// Spatio-temporal IoU over whole tracks; 0/0 counts as 0.
double st_iou(const std::vector<std::vector<std::uint8_t>>& pred,
              const std::vector<std::vector<std::uint8_t>>& gt);

struct TrackPrediction {
    std::size_t video_id = 0;
    std::size_t category = 0;
    double confidence = 0.0;
    std::vector<std::vector<std::uint8_t>> masks;
};

// Query-as-track readout of one video's decoder outputs: one prediction per
// query, category = best non-background column mapped through seen_categories,
// confidence = that column's softmax probability, mask pixel = logit > 0.
std::vector<TrackPrediction> tracks_from_logits(
    std::size_t video_id, const Matrix& class_logits,
    const std::vector<Matrix>& mask_logits,
    const std::vector<std::size_t>& seen_categories);

struct EvalReport {
    std::map<std::size_t, double> category_ap;
    double map = 0.0;
    double ap50 = 0.0;
    double ap75 = 0.0;
    double ar1 = 0.0;
    double ar10 = 0.0;
};

// Greedy average precision for one candidate pool: iou(i, j) between
// prediction i and ground-truth j, predictions taken in descending
// confidence (ties keep lower index), all-points interpolated area under the
// precision-recall curve. Exposed so tests can drive it with an exhaustive
// oracle.
double average_precision(const Matrix& iou, const std::vector<double>& confidence,
                         double threshold);

// The ten-threshold grid 0.50:0.05:0.95.
std::vector<double> iou_thresholds();

EvalReport evaluate(const std::vector<TrackPrediction>& predictions,
                    const std::vector<SyntheticVideo>& gt_videos,
                    const std::vector<std::size_t>& categories);

struct FirstAp {
    std::size_t step = 0;  // 0-based step at which the category was learned
    double ap = 0.0;
};

struct ForgettingLedger {
    std::map<std::size_t, FirstAp> first_ap;
    std::map<std::size_t, double> final_ap;
    std::size_t steps = 0;  // T
};

// The printed indicator of the source equation returns 0 exactly when
// forgetting occurred, which annihilates every non-negative term; `literal`
// reproduces that (and is therefore identically zero with the clamped
// ratio), `corrected` counts a drop as forgetting.
enum class FrIndicator { corrected, literal };

struct FrResult {
    double value = 0.0;
    std::size_t skipped_zero_first = 0;  // categories with zero first AP
};

FrResult forgetting_ratio(const ForgettingLedger& ledger,
                          FrIndicator mode = FrIndicator::corrected);

// Pearson correlation between query rows; unit diagonal, symmetric.
Matrix query_correlation(const Matrix& q);

// CSV with header "label,dim0,...,dimK" and 17-significant-digit values.
void export_embeddings(const Matrix& q, const std::vector<std::string>& labels,
                       const std::string& path);

// Dataset persistence: JSON (masks run-length encoded per frame) plus a
// sidecar binary block `<base>.features.bin` holding the pixel features.
void save_dataset(const Dataset& dataset, const std::string& json_path);
Dataset load_dataset(const std::string& json_path);

}  // namespace crisp
