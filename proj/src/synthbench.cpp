#include "crisp/synthbench.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <string>
#include <utility>

#include "crisp/errors.hpp"
#include "crisp/rng.hpp"

namespace crisp {

namespace {

constexpr std::size_t kShapeFamilies = 8;

// Cells of one blob inside an s x s bounding box, by shape family.
std::vector<std::pair<std::size_t, std::size_t>> family_cells(std::size_t family,
                                                              std::size_t s) {
    std::vector<std::pair<std::size_t, std::size_t>> cells;
    double c = (static_cast<double>(s) - 1.0) / 2.0;
    double r = static_cast<double>(s) / 2.0;
    std::size_t mid = s / 2;
    std::size_t third = s / 3;
    for (std::size_t i = 0; i < s; ++i) {
        for (std::size_t j = 0; j < s; ++j) {
            bool in = false;
            double di = static_cast<double>(i) - c, dj = static_cast<double>(j) - c;
            switch (family % kShapeFamilies) {
                case 0: in = di * di + dj * dj <= r * r; break;            // disc
                case 1: in = true; break;                                  // square
                case 2: in = i >= third && i + third < s; break;           // bar
                case 3: in = j == 0 || i + 1 == s; break;                  // L
                case 4: in = i == 0 || j == mid; break;                    // T
                case 5: in = i == mid || j == mid; break;                  // plus
                case 6: in = (i > j ? i - j : j - i) <= s / 4; break;      // diagonal
                case 7: in = i == 0 || i + 1 == s || j == 0 || j + 1 == s; break;  // ring
            }
            if (in) cells.emplace_back(i, j);
        }
    }
    return cells;
}

void validate_generator(const GeneratorConfig& cfg) {
    if (cfg.videos_per_category == 0 || cfg.frames_per_video == 0 || cfg.grid == 0 ||
        cfg.feature_dim == 0) {
        throw ParamError("generate_dataset: counts and dimensions must be positive");
    }
    if (cfg.blob_min == 0 || cfg.blob_max < cfg.blob_min) {
        throw ParamError("generate_dataset: blob size range invalid");
    }
    if (!(cfg.noise_amplitude >= 0.0)) {
        throw ParamError("generate_dataset: noise amplitude must be non-negative");
    }
    std::size_t travel = cfg.motion_step * (cfg.frames_per_video - 1);
    if (cfg.blob_max + travel > cfg.grid) {
        throw ConfigError("generate_dataset: blob cannot fit: size " +
                          std::to_string(cfg.blob_max) + " plus travel " +
                          std::to_string(travel) + " exceeds grid " +
                          std::to_string(cfg.grid));
    }
}

// Seeded linear code from per-pixel scene channels to feature space. The
// channels are [bias, shape-family one-hot (8), x, y, occupancy].
constexpr std::size_t kChannels = 12;

Matrix feature_code(std::uint64_t seed, std::size_t dim) {
    SeededRng rng(derive_seed(seed, "feature-code"));
    Matrix code(kChannels, dim);
    double scale = 1.0 / std::sqrt(static_cast<double>(kChannels));
    for (std::size_t i = 0; i < code.size(); ++i) code.data()[i] = scale * rng.gaussian();
    return code;
}

SyntheticVideo make_video(const GeneratorConfig& cfg,
                          const std::vector<std::size_t>& class_set,
                          std::size_t category, std::size_t replicate,
                          const Matrix& code) {
    SeededRng rng(derive_seed(
        derive_seed(derive_seed(cfg.seed, "video"), category), replicate));
    const std::size_t g = cfg.grid, frames = cfg.frames_per_video;

    SyntheticVideo video;
    video.video_id = category * 1000000 + replicate;
    video.frames = frames;
    video.height = g;
    video.width = g;

    std::size_t blob_count = 1 + rng.below(3);
    for (std::size_t k = 0; k < blob_count; ++k) {
        Instance inst;
        inst.track_id = k;
        inst.category = k == 0 ? category : class_set[rng.below(class_set.size())];

        std::size_t s = cfg.blob_min + rng.below(cfg.blob_max - cfg.blob_min + 1);
        long dx = 0, dy = 0;
        do {
            dx = static_cast<long>(rng.below(3)) - 1;
            dy = static_cast<long>(rng.below(3)) - 1;
        } while (dx == 0 && dy == 0);
        long travel = static_cast<long>(cfg.motion_step) *
                      static_cast<long>(frames - 1);
        long tx = travel * dx, ty = travel * dy;
        long x_lo = std::max<long>(0, -tx);
        long x_hi = static_cast<long>(g - s) - std::max<long>(0, tx);
        long y_lo = std::max<long>(0, -ty);
        long y_hi = static_cast<long>(g - s) - std::max<long>(0, ty);
        long x0 = x_lo + static_cast<long>(rng.below(
                             static_cast<std::uint64_t>(x_hi - x_lo + 1)));
        long y0 = y_lo + static_cast<long>(rng.below(
                             static_cast<std::uint64_t>(y_hi - y_lo + 1)));

        auto cells = family_cells(inst.category, s);
        inst.masks.assign(frames, std::vector<std::uint8_t>(g * g, 0));
        for (std::size_t f = 0; f < frames; ++f) {
            long ox = x0 + static_cast<long>(f * cfg.motion_step) * dx;
            long oy = y0 + static_cast<long>(f * cfg.motion_step) * dy;
            for (auto [ci, cj] : cells) {
                std::size_t row = static_cast<std::size_t>(oy) + ci;
                std::size_t col = static_cast<std::size_t>(ox) + cj;
                inst.masks[f][row * g + col] = 1;
            }
        }
        video.instances.push_back(std::move(inst));
    }

    // Features: the topmost (lowest track id) instance stamps its shape
    // family; position and occupancy complete the channel vector.
    for (std::size_t f = 0; f < frames; ++f) {
        Matrix feat(g * g, cfg.feature_dim);
        for (std::size_t y = 0; y < g; ++y) {
            for (std::size_t x = 0; x < g; ++x) {
                std::size_t px = y * g + x;
                double channels[kChannels] = {};
                channels[0] = 1.0;
                for (const Instance& inst : video.instances) {
                    if (inst.masks[f][px]) {
                        channels[1 + inst.category % kShapeFamilies] = 1.0;
                        channels[11] = 1.0;
                        break;
                    }
                }
                channels[9] = g > 1 ? static_cast<double>(x) / static_cast<double>(g - 1)
                                    : 0.5;
                channels[10] = g > 1 ? static_cast<double>(y) / static_cast<double>(g - 1)
                                     : 0.5;
                for (std::size_t j = 0; j < cfg.feature_dim; ++j) {
                    double acc = 0.0;
                    for (std::size_t k = 0; k < kChannels; ++k) {
                        acc += channels[k] * code(k, j);
                    }
                    feat(px, j) = acc + cfg.noise_amplitude * rng.gaussian();
                }
            }
        }
        video.pixel_features.push_back(std::move(feat));
    }
    return video;
}

}  // namespace

Dataset generate_dataset(const GeneratorConfig& cfg,
                         const std::vector<std::size_t>& class_set) {
    if (class_set.empty()) {
        throw ParamError("generate_dataset: class set is empty");
    }
    validate_generator(cfg);
    Matrix code = feature_code(cfg.seed, cfg.feature_dim);

    std::size_t vpc = cfg.videos_per_category;
    std::size_t n_val = vpc >= 2 ? std::max<std::size_t>(1, vpc / 5) : 0;
    std::size_t n_train = vpc - n_val;

    Dataset out;
    for (std::size_t category : class_set) {
        for (std::size_t v = 0; v < vpc; ++v) {
            SyntheticVideo video = make_video(cfg, class_set, category, v, code);
            (v < n_train ? out.train : out.val).push_back(std::move(video));
        }
    }
    return out;
}

double st_iou(const std::vector<std::vector<std::uint8_t>>& pred,
              const std::vector<std::vector<std::uint8_t>>& gt) {
    if (pred.size() != gt.size()) {
        throw ShapeError("st_iou: " + std::to_string(pred.size()) + " vs " +
                         std::to_string(gt.size()) + " frames");
    }
    std::size_t inter = 0, uni = 0;
    for (std::size_t f = 0; f < pred.size(); ++f) {
        if (pred[f].size() != gt[f].size()) {
            throw ShapeError("st_iou: frame " + std::to_string(f) +
                             " pixel counts differ");
        }
        for (std::size_t p = 0; p < pred[f].size(); ++p) {
            bool a = pred[f][p] != 0, b = gt[f][p] != 0;
            inter += a && b;
            uni += a || b;
        }
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<TrackPrediction> tracks_from_logits(
    std::size_t video_id, const Matrix& class_logits,
    const std::vector<Matrix>& mask_logits,
    const std::vector<std::size_t>& seen_categories) {
    if (class_logits.cols() != seen_categories.size() + 1) {
        throw ShapeError("tracks_from_logits: " + std::to_string(class_logits.cols()) +
                         " class columns for " + std::to_string(seen_categories.size()) +
                         " categories");
    }
    if (seen_categories.empty()) return {};
    for (const Matrix& m : mask_logits) {
        if (m.rows() != class_logits.rows()) {
            throw ShapeError("tracks_from_logits: mask rows " +
                             std::to_string(m.rows()) + " vs " +
                             std::to_string(class_logits.rows()) + " queries");
        }
    }

    Matrix probs = softmax_rows(class_logits);
    std::vector<TrackPrediction> out;
    for (std::size_t q = 0; q < probs.rows(); ++q) {
        std::size_t best = 1;
        for (std::size_t j = 2; j < probs.cols(); ++j) {
            if (probs(q, j) > probs(q, best)) best = j;
        }
        TrackPrediction p;
        p.video_id = video_id;
        p.category = seen_categories[best - 1];
        p.confidence = probs(q, best);
        for (const Matrix& m : mask_logits) {
            std::vector<std::uint8_t> mask(m.cols());
            for (std::size_t px = 0; px < m.cols(); ++px) {
                mask[px] = m(q, px) > 0.0 ? 1 : 0;
            }
            p.masks.push_back(std::move(mask));
        }
        out.push_back(std::move(p));
    }
    return out;
}

namespace {

std::vector<std::size_t> confidence_order(const std::vector<double>& conf,
                                          const std::vector<std::size_t>& subset) {
    std::vector<std::size_t> order = subset;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return conf[a] > conf[b]; });
    return order;
}

// Greedy matching: predictions in `order`, each takes the highest-IoU
// unmatched ground truth at or above the threshold (ties keep the lower
// index). Returns a TP flag per order position.
std::vector<char> greedy_match(const Matrix& iou, const std::vector<std::size_t>& order,
                               double threshold) {
    std::vector<char> matched(iou.cols(), 0);
    std::vector<char> tp(order.size(), 0);
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
        std::size_t i = order[pos];
        std::size_t best_j = static_cast<std::size_t>(-1);
        double best = -1.0;
        for (std::size_t j = 0; j < iou.cols(); ++j) {
            if (matched[j] || iou(i, j) < threshold) continue;
            if (iou(i, j) > best) {
                best = iou(i, j);
                best_j = j;
            }
        }
        if (best_j != static_cast<std::size_t>(-1)) {
            matched[best_j] = 1;
            tp[pos] = 1;
        }
    }
    return tp;
}

double ap_from_order(const Matrix& iou, const std::vector<std::size_t>& order,
                     double threshold) {
    std::size_t n_gt = iou.cols();
    if (n_gt == 0 || order.empty()) return 0.0;
    std::vector<char> tp = greedy_match(iou, order, threshold);

    std::vector<double> precision(order.size()), recall(order.size());
    std::size_t tp_cum = 0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        tp_cum += tp[i] ? 1 : 0;
        precision[i] = static_cast<double>(tp_cum) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp_cum) / static_cast<double>(n_gt);
    }
    for (std::size_t i = order.size() - 1; i-- > 0;) {
        precision[i] = std::max(precision[i], precision[i + 1]);
    }
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

}  // namespace

std::vector<double> iou_thresholds() {
    std::vector<double> out;
    for (int k = 0; k < 10; ++k) out.push_back(0.5 + 0.05 * k);
    return out;
}

double average_precision(const Matrix& iou, const std::vector<double>& confidence,
                         double threshold) {
    if (confidence.size() != iou.rows()) {
        throw ShapeError("average_precision: " + std::to_string(confidence.size()) +
                         " confidences for " + std::to_string(iou.rows()) +
                         " predictions");
    }
    std::vector<std::size_t> all(iou.rows());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return ap_from_order(iou, confidence_order(confidence, all), threshold);
}

EvalReport evaluate(const std::vector<TrackPrediction>& predictions,
                    const std::vector<SyntheticVideo>& gt_videos,
                    const std::vector<std::size_t>& categories) {
    std::map<std::size_t, std::size_t> video_index;
    for (std::size_t v = 0; v < gt_videos.size(); ++v) {
        video_index[gt_videos[v].video_id] = v;
    }
    for (const TrackPrediction& p : predictions) {
        auto it = video_index.find(p.video_id);
        if (it == video_index.end()) {
            throw ContractError("evaluate: prediction references unknown video " +
                                std::to_string(p.video_id));
        }
        if (p.masks.size() != gt_videos[it->second].frames) {
            throw ContractError("evaluate: prediction for video " +
                                std::to_string(p.video_id) + " has " +
                                std::to_string(p.masks.size()) + " frames, video has " +
                                std::to_string(gt_videos[it->second].frames));
        }
    }

    std::vector<double> thresholds = iou_thresholds();
    EvalReport report;
    std::size_t included = 0;
    double sum_map = 0, sum_50 = 0, sum_75 = 0, sum_ar1 = 0, sum_ar10 = 0;

    for (std::size_t category : categories) {
        // Ground-truth tracks of this category, in video order.
        std::vector<std::pair<std::size_t, std::size_t>> gts;  // (video idx, instance idx)
        for (std::size_t v = 0; v < gt_videos.size(); ++v) {
            for (std::size_t k = 0; k < gt_videos[v].instances.size(); ++k) {
                if (gt_videos[v].instances[k].category == category) gts.emplace_back(v, k);
            }
        }
        if (gts.empty()) continue;

        std::vector<std::size_t> preds;
        for (std::size_t i = 0; i < predictions.size(); ++i) {
            if (predictions[i].category == category) preds.push_back(i);
        }

        Matrix iou(preds.size(), gts.size());
        std::vector<double> conf(preds.size());
        for (std::size_t i = 0; i < preds.size(); ++i) {
            const TrackPrediction& p = predictions[preds[i]];
            conf[i] = p.confidence;
            for (std::size_t j = 0; j < gts.size(); ++j) {
                const SyntheticVideo& video = gt_videos[gts[j].first];
                if (p.video_id != video.video_id) continue;
                iou(i, j) = st_iou(p.masks, video.instances[gts[j].second].masks);
            }
        }

        double ap_sum = 0, ap50 = 0, ap75 = 0;
        for (std::size_t k = 0; k < thresholds.size(); ++k) {
            double ap = average_precision(iou, conf, thresholds[k]);
            ap_sum += ap;
            if (k == 0) ap50 = ap;
            if (k == 5) ap75 = ap;
        }
        double ap_mean = ap_sum / static_cast<double>(thresholds.size());

        // AR@k: per video keep the k most confident predictions, then measure
        // the matched fraction of ground truth, averaged over thresholds.
        auto recall_at = [&](std::size_t k) {
            std::vector<std::size_t> kept;
            for (std::size_t v = 0; v < gt_videos.size(); ++v) {
                std::vector<std::size_t> in_video;
                for (std::size_t i = 0; i < preds.size(); ++i) {
                    if (predictions[preds[i]].video_id == gt_videos[v].video_id) {
                        in_video.push_back(i);
                    }
                }
                std::vector<std::size_t> ranked = confidence_order(conf, in_video);
                for (std::size_t i = 0; i < ranked.size() && i < k; ++i) {
                    kept.push_back(ranked[i]);
                }
            }
            std::vector<std::size_t> order = confidence_order(conf, kept);
            double total = 0;
            for (double thr : thresholds) {
                std::vector<char> tp = greedy_match(iou, order, thr);
                std::size_t hits = 0;
                for (char t : tp) hits += t ? 1 : 0;
                total += static_cast<double>(hits) / static_cast<double>(gts.size());
            }
            return total / static_cast<double>(thresholds.size());
        };

        report.category_ap[category] = ap_mean;
        sum_map += ap_mean;
        sum_50 += ap50;
        sum_75 += ap75;
        sum_ar1 += recall_at(1);
        sum_ar10 += recall_at(10);
        ++included;
    }

    if (included > 0) {
        double n = static_cast<double>(included);
        report.map = sum_map / n;
        report.ap50 = sum_50 / n;
        report.ap75 = sum_75 / n;
        report.ar1 = sum_ar1 / n;
        report.ar10 = sum_ar10 / n;
    }
    return report;
}

FrResult forgetting_ratio(const ForgettingLedger& ledger, FrIndicator mode) {
    if (ledger.steps == 0) {
        throw ContractError("forgetting_ratio: ledger has no steps");
    }
    FrResult result;
    double sum = 0.0;
    std::size_t counted = 0;
    for (const auto& [category, first] : ledger.first_ap) {
        auto it = ledger.final_ap.find(category);
        if (it == ledger.final_ap.end()) {
            throw ContractError("forgetting_ratio: missing final AP for category " +
                                std::to_string(category));
        }
        if (first.step + 1 >= ledger.steps) {
            // Learned at the final step: counted in N_c, contributes nothing.
            ++counted;
            continue;
        }
        if (first.ap <= 0.0) {
            ++result.skipped_zero_first;
            continue;
        }
        ++counted;
        double drop = first.ap - it->second;
        double ratio = drop > 0.0 ? drop / first.ap : 0.0;
        double indicator;
        if (mode == FrIndicator::corrected) {
            indicator = drop >= 0.0 ? 1.0 : 0.0;
        } else {
            indicator = drop >= 0.0 ? 0.0 : 1.0;
        }
        double weight = 1.0 / static_cast<double>(ledger.steps - 1 - first.step);
        sum += weight * indicator * ratio;
    }
    if (counted > 0) result.value = sum / static_cast<double>(counted);
    return result;
}

Matrix query_correlation(const Matrix& q) {
    if (q.rows() < 2) {
        throw ContractError("query_correlation: need at least 2 rows, got " +
                            std::to_string(q.rows()));
    }
    const std::size_t n = q.rows(), d = q.cols();
    Matrix centered(n, d);
    std::vector<double> sum_sq(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mean = 0.0, raw = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += q(i, j);
        mean /= static_cast<double>(d);
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            centered(i, j) = q(i, j) - mean;
            ss += centered(i, j) * centered(i, j);
            raw += q(i, j) * q(i, j);
        }
        if (ss < 1e-24 * std::max(1.0, raw)) {
            throw DegenerateError("query_correlation: row " + std::to_string(i) +
                                  " is constant");
        }
        sum_sq[i] = ss;
    }
    Matrix out(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        out(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < d; ++k) dot += centered(i, k) * centered(j, k);
            // sqrt of the product (rather than product of sqrts) keeps the
            // correlation of duplicated rows at exactly 1.
            double corr = dot / std::sqrt(sum_sq[i] * sum_sq[j]);
            out(i, j) = corr;
            out(j, i) = corr;
        }
    }
    return out;
}

void export_embeddings(const Matrix& q, const std::vector<std::string>& labels,
                       const std::string& path) {
    if (labels.size() != q.rows()) {
        throw ShapeError("export_embeddings: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(q.rows()) + " rows");
    }
    std::ofstream file(path);
    if (!file) {
        throw IoError("export_embeddings: cannot write " + path);
    }
    file << "label";
    for (std::size_t j = 0; j < q.cols(); ++j) file << ",dim" << j;
    file << "\n";
    for (std::size_t i = 0; i < q.rows(); ++i) {
        file << labels[i];
        for (std::size_t j = 0; j < q.cols(); ++j) file << "," << format_double(q(i, j));
        file << "\n";
    }
    file.flush();
    if (!file.good()) {
        throw IoError("export_embeddings: write to " + path + " failed");
    }
}

namespace {

using nlohmann::json;

std::vector<std::size_t> rle_encode(const std::vector<std::uint8_t>& mask) {
    std::vector<std::size_t> runs;
    std::uint8_t expected = 0;
    std::size_t count = 0;
    for (std::uint8_t px : mask) {
        std::uint8_t bit = px != 0 ? 1 : 0;
        if (bit == expected) {
            ++count;
        } else {
            runs.push_back(count);
            expected ^= 1;
            count = 1;
        }
    }
    runs.push_back(count);
    return runs;
}

std::vector<std::uint8_t> rle_decode(const std::vector<std::size_t>& runs,
                                     std::size_t pixels) {
    std::vector<std::uint8_t> mask;
    mask.reserve(pixels);
    std::uint8_t value = 0;
    for (std::size_t run : runs) {
        for (std::size_t i = 0; i < run; ++i) mask.push_back(value);
        value ^= 1;
    }
    if (mask.size() != pixels) {
        throw IoError("load_dataset: mask run lengths sum to " +
                      std::to_string(mask.size()) + ", expected " +
                      std::to_string(pixels));
    }
    return mask;
}

json video_to_json(const SyntheticVideo& v) {
    json instances = json::array();
    for (const Instance& inst : v.instances) {
        json masks = json::array();
        for (const auto& m : inst.masks) masks.push_back(rle_encode(m));
        instances.push_back({{"track", inst.track_id},
                             {"category", inst.category},
                             {"masks", masks}});
    }
    return {{"id", v.video_id},
            {"frames", v.frames},
            {"height", v.height},
            {"width", v.width},
            {"instances", instances}};
}

SyntheticVideo video_from_json(const json& j) {
    SyntheticVideo v;
    v.video_id = j.at("id").get<std::size_t>();
    v.frames = j.at("frames").get<std::size_t>();
    v.height = j.at("height").get<std::size_t>();
    v.width = j.at("width").get<std::size_t>();
    std::size_t pixels = v.height * v.width;
    for (const json& ij : j.at("instances")) {
        Instance inst;
        inst.track_id = ij.at("track").get<std::size_t>();
        inst.category = ij.at("category").get<std::size_t>();
        for (const json& mj : ij.at("masks")) {
            inst.masks.push_back(rle_decode(mj.get<std::vector<std::size_t>>(), pixels));
        }
        if (inst.masks.size() != v.frames) {
            throw IoError("load_dataset: instance has " +
                          std::to_string(inst.masks.size()) + " mask frames, video has " +
                          std::to_string(v.frames));
        }
        v.instances.push_back(std::move(inst));
    }
    return v;
}

std::string sidecar_path(const std::string& json_path) {
    const std::string suffix = ".json";
    if (json_path.size() > suffix.size() &&
        json_path.compare(json_path.size() - suffix.size(), suffix.size(), suffix) == 0) {
        return json_path.substr(0, json_path.size() - suffix.size()) + ".features.bin";
    }
    return json_path + ".features.bin";
}

void write_features(std::ofstream& out, const SyntheticVideo& v) {
    for (const Matrix& m : v.pixel_features) {
        out.write(reinterpret_cast<const char*>(m.data().data()),
                  static_cast<std::streamsize>(m.size() * sizeof(double)));
    }
}

void read_features(std::ifstream& in, SyntheticVideo& v, std::size_t dim) {
    for (std::size_t f = 0; f < v.frames; ++f) {
        Matrix m(v.height * v.width, dim);
        in.read(reinterpret_cast<char*>(m.data().data()),
                static_cast<std::streamsize>(m.size() * sizeof(double)));
        if (!in) {
            throw IoError("load_dataset: feature block truncated for video " +
                          std::to_string(v.video_id));
        }
        require_finite(m, "load_dataset features");
        v.pixel_features.push_back(std::move(m));
    }
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::string& json_path) {
    std::size_t dim = 0;
    for (const auto* part : {&dataset.train, &dataset.val}) {
        for (const SyntheticVideo& v : *part) {
            if (!v.pixel_features.empty()) dim = v.pixel_features[0].cols();
        }
    }

    json j;
    j["feature_dim"] = dim;
    j["train"] = json::array();
    for (const SyntheticVideo& v : dataset.train) j["train"].push_back(video_to_json(v));
    j["val"] = json::array();
    for (const SyntheticVideo& v : dataset.val) j["val"].push_back(video_to_json(v));

    std::ofstream file(json_path);
    if (!file) {
        throw IoError("save_dataset: cannot write " + json_path);
    }
    file << j.dump(2) << "\n";
    file.flush();
    if (!file.good()) {
        throw IoError("save_dataset: write to " + json_path + " failed");
    }

    std::string bin_path = sidecar_path(json_path);
    std::ofstream bin(bin_path, std::ios::binary);
    if (!bin) {
        throw IoError("save_dataset: cannot write " + bin_path);
    }
    const char magic[] = "crisp-features v1\n";
    bin.write(magic, sizeof(magic) - 1);
    for (const SyntheticVideo& v : dataset.train) write_features(bin, v);
    for (const SyntheticVideo& v : dataset.val) write_features(bin, v);
    bin.flush();
    if (!bin.good()) {
        throw IoError("save_dataset: write to " + bin_path + " failed");
    }
}

Dataset load_dataset(const std::string& json_path) {
    std::ifstream file(json_path);
    if (!file) {
        throw IoError("load_dataset: cannot open " + json_path);
    }
    json j;
    try {
        file >> j;
    } catch (const json::exception& e) {
        throw IoError("load_dataset: " + json_path + ": " + e.what());
    }

    Dataset dataset;
    std::size_t dim = 0;
    try {
        dim = j.at("feature_dim").get<std::size_t>();
        for (const json& vj : j.at("train")) dataset.train.push_back(video_from_json(vj));
        for (const json& vj : j.at("val")) dataset.val.push_back(video_from_json(vj));
    } catch (const json::exception& e) {
        throw IoError("load_dataset: " + json_path + ": " + e.what());
    }

    std::string bin_path = sidecar_path(json_path);
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) {
        throw IoError("load_dataset: cannot open " + bin_path);
    }
    std::string magic(18, '\0');
    bin.read(magic.data(), 18);
    if (!bin || magic != "crisp-features v1\n") {
        throw IoError("load_dataset: " + bin_path + " has an unexpected header");
    }
    for (SyntheticVideo& v : dataset.train) read_features(bin, v, dim);
    for (SyntheticVideo& v : dataset.val) read_features(bin, v, dim);
    char extra;
    if (bin.read(&extra, 1)) {
        throw IoError("load_dataset: " + bin_path + " has trailing data");
    }
    return dataset;
}

}  // namespace crisp
