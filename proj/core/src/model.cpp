#include "faultline/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "faultline/error.hpp"

namespace faultline {

namespace {

void require_finite(const std::vector<double>& values, const char* what) {
  for (double x : values) {
    if (!std::isfinite(x)) throw Error(ErrorCode::kInvalidArgument, std::string(what) + " contains non-finite values");
  }
}

}  // namespace

ActivationTensor::ActivationTensor(std::size_t maps, std::size_t height, std::size_t width)
    : ActivationTensor(maps, height, width, std::vector<double>(maps * height * width, 0.0)) {}

ActivationTensor::ActivationTensor(std::size_t maps, std::size_t height, std::size_t width,
                                   std::vector<double> values)
    : maps_(maps), height_(height), width_(width), values_(std::move(values)) {
  if (maps == 0 || height == 0 || width == 0) {
    throw Error(ErrorCode::kShape, "activation tensor dimensions must be >= 1");
  }
  if (values_.size() != maps * height * width) {
    throw Error(ErrorCode::kShape, "activation tensor value count != m*u*v");
  }
  require_finite(values_, "activation tensor");
}

ClassifierHead::ClassifierHead(std::vector<Vector> weights, Vector bias,
                               std::vector<std::string> labels)
    : weights_(std::move(weights)), bias_(std::move(bias)), labels_(std::move(labels)) {
  if (labels_.size() < 2) throw Error(ErrorCode::kShape, "classifier head needs at least two classes");
  if (weights_.size() != labels_.size() || bias_.size() != labels_.size()) {
    throw Error(ErrorCode::kShape, "head weight rows / bias / labels disagree");
  }
  maps_ = weights_.front().size();
  if (maps_ == 0) throw Error(ErrorCode::kShape, "head weights have zero columns");
  for (const auto& row : weights_) {
    if (row.size() != maps_) throw Error(ErrorCode::kShape, "ragged head weight matrix");
    require_finite(row, "head weights");
  }
  require_finite(bias_, "head bias");
  for (std::size_t c = 0; c < labels_.size(); ++c) {
    if (!index_.emplace(labels_[c], c).second) {
      throw Error(ErrorCode::kInvalidArgument, "duplicate class label '" + labels_[c] + "'");
    }
  }
}

std::size_t ClassifierHead::class_index(const std::string& label) const {
  auto it = index_.find(label);
  if (it == index_.end()) throw Error(ErrorCode::kUnknownClass, "unknown class '" + label + "'");
  return it->second;
}

ClassifierHead ClassifierHead::scaled(double factor) const {
  auto w = weights_;
  auto b = bias_;
  for (auto& row : w) {
    for (double& x : row) x *= factor;
  }
  for (double& x : b) x *= factor;
  return ClassifierHead(std::move(w), std::move(b), labels_);
}

LabeledActivationSet::LabeledActivationSet(std::vector<std::string> classes, std::size_t maps,
                                           std::size_t height, std::size_t width)
    : classes_(std::move(classes)), maps_(maps), height_(height), width_(width) {
  std::set<std::string> seen;
  for (const auto& c : classes_) {
    if (!seen.insert(c).second) throw Error(ErrorCode::kInvalidArgument, "duplicate class '" + c + "'");
    class_index_[c];
  }
}

void LabeledActivationSet::add(LabeledItem item) {
  if (item.activation.maps() != maps_ || item.activation.height() != height_ ||
      item.activation.width() != width_) {
    throw Error(ErrorCode::kShape, "activation shape differs from set shape for '" + item.image_id + "'");
  }
  auto cls = class_index_.find(item.true_class);
  if (cls == class_index_.end()) {
    throw Error(ErrorCode::kUnknownLabel, "label '" + item.true_class + "' not in manifest");
  }
  if (!by_id_.emplace(item.image_id, items_.size()).second) {
    throw Error(ErrorCode::kInvalidArgument, "duplicate image id '" + item.image_id + "'");
  }
  cls->second.push_back(item.image_id);
  items_.push_back(std::move(item));
}

const std::vector<std::string>& LabeledActivationSet::ids_of(const std::string& label) const {
  auto it = class_index_.find(label);
  if (it == class_index_.end()) throw Error(ErrorCode::kUnknownClass, "unknown class '" + label + "'");
  return it->second;
}

const LabeledItem& LabeledActivationSet::find(const std::string& image_id) const {
  auto it = by_id_.find(image_id);
  if (it == by_id_.end()) throw Error(ErrorCode::kNotFound, "unknown image '" + image_id + "'");
  return items_[it->second];
}

bool operator==(const LabeledActivationSet& a, const LabeledActivationSet& b) {
  if (a.classes_ != b.classes_ || a.maps_ != b.maps_ || a.height_ != b.height_ ||
      a.width_ != b.width_ || a.items_.size() != b.items_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < a.items_.size(); ++i) {
    const auto& x = a.items_[i];
    const auto& y = b.items_[i];
    if (x.image_id != y.image_id || x.true_class != y.true_class || !(x.activation == y.activation)) {
      return false;
    }
  }
  return true;
}

Vector global_average_pool(const ActivationTensor& a) {
  Vector pooled(a.maps(), 0.0);
  const double z = static_cast<double>(a.plane_size());
  for (std::size_t k = 0; k < a.maps(); ++k) {
    double sum = 0.0;
    for (double x : a.plane(k)) sum += x;
    pooled[k] = sum / z;
  }
  return pooled;
}

Vector logits_from_pooled(const ClassifierHead& head, std::span<const double> pooled) {
  if (pooled.size() != head.num_maps()) {
    throw Error(ErrorCode::kShape, "head expects " + std::to_string(head.num_maps()) +
                                       " maps, got " + std::to_string(pooled.size()));
  }
  Vector y(head.bias());
  for (std::size_t c = 0; c < head.num_classes(); ++c) {
    const auto& w = head.row(c);
    for (std::size_t k = 0; k < pooled.size(); ++k) y[c] += w[k] * pooled[k];
  }
  return y;
}

Vector logits(const ClassifierHead& head, const ActivationTensor& a) {
  if (a.maps() != head.num_maps()) {
    throw Error(ErrorCode::kShape, "head expects " + std::to_string(head.num_maps()) +
                                       " maps, got " + std::to_string(a.maps()));
  }
  const auto pooled = global_average_pool(a);
  return logits_from_pooled(head, pooled);
}

std::size_t argmax(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::kShape, "argmax of empty vector");
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

std::size_t predicted_class(const ClassifierHead& head, const ActivationTensor& a) {
  const auto y = logits(head, a);
  return argmax(y);
}

ActivationTensor grad_logit_wrt_activations(const ClassifierHead& head, const ActivationTensor& a,
                                            const std::string& label) {
  const std::size_t c = head.class_index(label);
  if (a.maps() != head.num_maps()) throw Error(ErrorCode::kShape, "head/activation map count mismatch");
  ActivationTensor grad(a.maps(), a.height(), a.width());
  const double z = static_cast<double>(a.plane_size());
  for (std::size_t k = 0; k < a.maps(); ++k) {
    const double g = head.row(c)[k] / z;
    for (double& x : grad.plane(k)) x = g;
  }
  return grad;
}

std::size_t ModelBackend::class_index(const std::string& label) const {
  const auto& labels = class_labels();
  auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) throw Error(ErrorCode::kUnknownClass, "unknown class '" + label + "'");
  return static_cast<std::size_t>(it - labels.begin());
}

Vector GapLinearBackend::logits(const ActivationTensor& a) const {
  return faultline::logits(head_, a);
}

ActivationTensor GapLinearBackend::gradient(const ActivationTensor& a, std::size_t class_index) const {
  return grad_logit_wrt_activations(head_, a, head_.labels().at(class_index));
}

Vector GapLinearBackend::pooled_gradient(const ActivationTensor& a, std::size_t class_index) const {
  if (a.maps() != head_.num_maps()) throw Error(ErrorCode::kShape, "head/activation map count mismatch");
  return head_.row(class_index);
}

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kUnknownClass: return "unknown_class";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kMalformedHeader: return "malformed_header";
    case ErrorCode::kTruncatedPayload: return "truncated_payload";
    case ErrorCode::kUnknownLabel: return "unknown_label";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kDegenerateClustering: return "degenerate_clustering";
    case ErrorCode::kInseparable: return "inseparable";
    case ErrorCode::kEmptyClass: return "empty_class";
    case ErrorCode::kTooLarge: return "too_large";
    case ErrorCode::kDialogExhausted: return "dialog_exhausted";
    case ErrorCode::kEmptyBuffer: return "empty_buffer";
    case ErrorCode::kNotFound: return "not_found";
    case ErrorCode::kConflict: return "conflict";
    case ErrorCode::kEmptySet: return "empty_set";
  }
  return "unknown";
}

}  // namespace faultline
