#pragma once

// Automatic metrics (FID, CLIP-style scores, condition consistency), the
// human-preference tally, and report emitters.

#include "m3face/condition_codec.hpp"
#include "m3face/core/error.hpp"
#include "m3face/core/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace m3face::metrics {

struct GaussianStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;

    int dim() const { return static_cast<int>(mean.size()); }

    void validate() const {
        if (cov.rows() != mean.size() || cov.cols() != mean.size()) throw ValidationError("covariance shape does not match mean");
        if (!mean.allFinite() || !cov.allFinite()) throw ValidationError("Gaussian statistics contain non-finite values");
        if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-9 * (1.0 + cov.cwiseAbs().maxCoeff()))
            throw ValidationError("covariance is not symmetric");
    }
};

using Features = std::vector<std::vector<double>>;

/// Mean and unbiased covariance; with fewer samples than dimensions a 1e-6
/// diagonal shrinkage is added.
inline GaussianStats fit_gaussian(const Features& x) {
    if (x.size() < 2) throw ValidationError("need at least two feature vectors, got " + std::to_string(x.size()));
    const auto d = static_cast<Eigen::Index>(x[0].size());
    if (d == 0) throw ValidationError("feature vectors are empty");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(x.size()), d);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (static_cast<Eigen::Index>(x[i].size()) != d) throw ValidationError("feature vectors have different lengths");
        for (Eigen::Index j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), j) = x[i][static_cast<std::size_t>(j)];
    }
    if (!m.allFinite()) throw ValidationError("features contain non-finite values");
    GaussianStats s;
    s.mean = m.colwise().mean().transpose();
    const Eigen::MatrixXd c = m.rowwise() - s.mean.transpose();
    s.cov = (c.transpose() * c) / static_cast<double>(x.size() - 1);
    if (static_cast<Eigen::Index>(x.size()) < d) s.cov.diagonal().array() += 1e-6;
    return s;
}

namespace detail {

inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& a) {
    const Eigen::MatrixXd sym = 0.5 * (a + a.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2)); the trace of the cross
/// term is computed as Tr((Sa^(1/2) Sb Sa^(1/2))^(1/2)).
inline double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    a.validate();
    b.validate();
    if (a.dim() != b.dim()) throw ValidationError("Gaussian statistics have different dimensions");
    const Eigen::MatrixXd ra = detail::psd_sqrt(a.cov);
    const Eigen::MatrixXd cross = detail::psd_sqrt(ra * b.cov * ra);
    const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    return std::max(0.0, d);
}

inline double fid(const Features& a, const Features& b) { return frechet_distance(fit_gaussian(a), fit_gaussian(b)); }

namespace detail {

inline double norm(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    // One sqrt of the product keeps a.a == b.b cases exactly at +-1.
    double dot = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return std::clamp(dot / std::sqrt(aa * bb), -1.0, 1.0);
}

}  // namespace detail

inline double clip_score(const std::vector<double>& image_emb, const std::vector<double>& text_emb) {
    if (image_emb.size() != text_emb.size()) throw ValidationError("embedding dimensions differ");
    if (detail::norm(image_emb) == 0.0) throw ValidationError("image embedding is the zero vector");
    if (detail::norm(text_emb) == 0.0) throw ValidationError("text embedding is the zero vector");
    return detail::cosine(image_emb, text_emb);
}

inline double directional_similarity(const std::vector<double>& img0, const std::vector<double>& img1,
                                     const std::vector<double>& txt0, const std::vector<double>& txt1) {
    if (img0.size() != img1.size() || txt0.size() != txt1.size() || img0.size() != txt0.size())
        throw ValidationError("embedding dimensions differ");
    std::vector<double> di(img0.size()), dt(txt0.size());
    for (std::size_t i = 0; i < di.size(); ++i) {
        di[i] = img1[i] - img0[i];
        dt[i] = txt1[i] - txt0[i];
    }
    if (detail::norm(di) == 0.0) throw ValidationError("image delta is zero");
    if (detail::norm(dt) == 0.0) throw ValidationError("text delta is zero");
    return detail::cosine(di, dt);
}

inline double seg_consistency(const condition::SegmentationMap& pred, const condition::SegmentationMap& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
        throw ValidationError("segmentation maps differ in size: " + std::to_string(pred.height) + "x" +
                              std::to_string(pred.width) + " vs " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
    if (gt.labels.empty()) throw ValidationError("segmentation maps are empty");
    std::size_t same = 0;
    for (std::size_t i = 0; i < gt.labels.size(); ++i) same += pred.labels[i] == gt.labels[i];
    return static_cast<double>(same) / static_cast<double>(gt.labels.size());
}

inline double landmark_consistency(const condition::LandmarkSet& pred, const condition::LandmarkSet& gt) {
    if (pred.convention != gt.convention)
        throw ValidationError("landmark conventions differ: '" + pred.convention + "' vs '" + gt.convention + "'");
    if (pred.points.size() != gt.points.size() || gt.points.empty())
        throw ValidationError("landmark sets differ in point count");
    double s = 0.0;
    for (std::size_t i = 0; i < gt.points.size(); ++i)
        s += std::hypot(pred.points[i][0] - gt.points[i][0], pred.points[i][1] - gt.points[i][1]);
    return s / static_cast<double>(gt.points.size());
}

struct TallySheet {
    std::map<std::string, long> counts;
};

/// Percentage of votes per method.
inline std::map<std::string, double> tally(const TallySheet& sheet) {
    long total = 0;
    for (const auto& [method, n] : sheet.counts) {
        if (n < 0) throw ValidationError("negative vote count for '" + method + "'");
        total += n;
    }
    if (total == 0) throw ValidationError("tally sheet has no votes");
    std::map<std::string, double> out;
    for (const auto& [method, n] : sheet.counts) out[method] = 100.0 * static_cast<double>(n) / static_cast<double>(total);
    return out;
}

/// Embedding backend for FID and CLIP-style scores.
class FeatureExtractor {
public:
    virtual ~FeatureExtractor() = default;
    virtual std::string id() const = 0;
    virtual std::vector<double> features(const std::vector<double>& planar_image) const = 0;
};

/// Fixed Gaussian random projection, a model-free stand-in.
class RandomProjectionExtractor final : public FeatureExtractor {
public:
    RandomProjectionExtractor(int in_dim, int out_dim, std::uint64_t seed = 0) : in_(in_dim), out_(out_dim) {
        if (in_dim < 1 || out_dim < 1) throw ValidationError("projection dimensions must be positive");
        Rng rng(derive_seed(seed, "random_projection"));
        w_ = rng.normal_vector(static_cast<std::size_t>(in_dim) * out_dim);
        for (auto& v : w_) v /= std::sqrt(static_cast<double>(in_dim));
    }

    std::string id() const override { return "random_projection"; }

    std::vector<double> features(const std::vector<double>& x) const override {
        if (static_cast<int>(x.size()) != in_) throw ValidationError("projection input has the wrong size");
        std::vector<double> out(static_cast<std::size_t>(out_), 0.0);
        for (int i = 0; i < in_; ++i)
            for (int j = 0; j < out_; ++j) out[j] += x[i] * w_[static_cast<std::size_t>(i) * out_ + j];
        return out;
    }

private:
    int in_, out_;
    std::vector<double> w_;
};

/// One row of a generation report; absent metrics print as "-".
struct MetricRow {
    std::string method;
    std::optional<double> fid, text, mask, landmark, human;
};

inline const std::vector<std::string>& report_columns() {
    static const std::vector<std::string> cols = {"method", "fid", "text", "mask", "landmark", "human"};
    return cols;
}

namespace detail {

inline std::string fmt(const std::optional<double>& v, int prec) {
    if (!v) return "-";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", prec, *v);
    return buf;
}

}  // namespace detail

inline std::string report_csv(const std::vector<MetricRow>& rows) {
    std::ostringstream out;
    const auto& cols = report_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
    out << '\n';
    for (const auto& r : rows)
        out << r.method << ',' << detail::fmt(r.fid, 4) << ',' << detail::fmt(r.text, 4) << ',' << detail::fmt(r.mask, 4)
            << ',' << detail::fmt(r.landmark, 4) << ',' << detail::fmt(r.human, 2) << '\n';
    return out.str();
}

/// Fixed-width table: Method, FID, Text, Mask, Landmark, Human.
inline std::string report_table(const std::vector<MetricRow>& rows) {
    std::ostringstream out;
    char line[160];
    std::snprintf(line, sizeof line, "%-16s %9s %9s %9s %9s %9s\n", "Method", "FID", "Text", "Mask", "Landmark", "Human");
    out << line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof line, "%-16s %9s %9s %9s %9s %9s\n", r.method.c_str(), detail::fmt(r.fid, 2).c_str(),
                      detail::fmt(r.text, 2).c_str(), detail::fmt(r.mask, 2).c_str(), detail::fmt(r.landmark, 4).c_str(),
                      detail::fmt(r.human, 2).c_str());
        out << line;
    }
    return out.str();
}

/// Published reference rows, used only for report formatting.
inline std::vector<MetricRow> reference_generation_rows() {
    return {{"TediGAN", 58.49, std::nullopt, 0.90, std::nullopt, 19.02},
            {"CollabDiff", 38.20, 24.80, 0.90, std::nullopt, 23.64},
            {"Ours", 30.16, 27.86, 0.93, std::nullopt, 57.34}};
}

}  // namespace m3face::metrics
