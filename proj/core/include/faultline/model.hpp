#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace faultline {

using Vector = std::vector<double>;

// Last-conv-layer activations of one image: `maps` feature maps of
// height x width, stored row-major as [map][row][col].
class ActivationTensor {
 public:
  ActivationTensor() = default;
  ActivationTensor(std::size_t maps, std::size_t height, std::size_t width);
  ActivationTensor(std::size_t maps, std::size_t height, std::size_t width,
                   std::vector<double> values);

  std::size_t maps() const noexcept { return maps_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t plane_size() const noexcept { return height_ * width_; }
  std::size_t size() const noexcept { return values_.size(); }

  double& at(std::size_t k, std::size_t i, std::size_t j) {
    return values_[(k * height_ + i) * width_ + j];
  }
  double at(std::size_t k, std::size_t i, std::size_t j) const {
    return values_[(k * height_ + i) * width_ + j];
  }

  std::span<const double> plane(std::size_t k) const {
    return {values_.data() + k * plane_size(), plane_size()};
  }
  std::span<double> plane(std::size_t k) {
    return {values_.data() + k * plane_size(), plane_size()};
  }

  const std::vector<double>& values() const noexcept { return values_; }
  std::vector<double>& values() noexcept { return values_; }

  bool same_shape(const ActivationTensor& other) const noexcept {
    return maps_ == other.maps_ && height_ == other.height_ && width_ == other.width_;
  }

  friend bool operator==(const ActivationTensor&, const ActivationTensor&) = default;

 private:
  std::size_t maps_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<double> values_;
};

// Linear classifier over the GAP-pooled activation vector:
// y = weights * gap(A) + bias.
class ClassifierHead {
 public:
  ClassifierHead() = default;
  ClassifierHead(std::vector<Vector> weights, Vector bias, std::vector<std::string> labels);

  std::size_t num_classes() const noexcept { return labels_.size(); }
  std::size_t num_maps() const noexcept { return maps_; }

  const std::vector<Vector>& weights() const noexcept { return weights_; }
  const Vector& row(std::size_t c) const { return weights_.at(c); }
  const Vector& bias() const noexcept { return bias_; }
  const std::vector<std::string>& labels() const noexcept { return labels_; }

  // Throws Error(kUnknownClass) for labels not in the head.
  std::size_t class_index(const std::string& label) const;
  bool has_class(const std::string& label) const { return index_.count(label) != 0; }

  // Same head with weights and bias multiplied by `factor`.
  ClassifierHead scaled(double factor) const;

 private:
  std::vector<Vector> weights_;
  Vector bias_;
  std::vector<std::string> labels_;
  std::map<std::string, std::size_t> index_;
  std::size_t maps_ = 0;
};

struct LabeledItem {
  std::string image_id;
  ActivationTensor activation;
  std::string true_class;
};

class LabeledActivationSet {
 public:
  LabeledActivationSet() = default;
  LabeledActivationSet(std::vector<std::string> classes, std::size_t maps, std::size_t height,
                       std::size_t width);

  void add(LabeledItem item);

  const std::vector<std::string>& classes() const noexcept { return classes_; }
  const std::vector<LabeledItem>& items() const noexcept { return items_; }
  std::size_t size() const noexcept { return items_.size(); }
  bool empty() const noexcept { return items_.empty(); }
  std::size_t maps() const noexcept { return maps_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }

  // Item ids by true class, in insertion order.
  const std::vector<std::string>& ids_of(const std::string& label) const;
  const LabeledItem& find(const std::string& image_id) const;
  bool contains(const std::string& image_id) const { return by_id_.count(image_id) != 0; }

  friend bool operator==(const LabeledActivationSet& a, const LabeledActivationSet& b);

 private:
  std::vector<std::string> classes_;
  std::size_t maps_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<LabeledItem> items_;
  std::map<std::string, std::vector<std::string>> class_index_;
  std::map<std::string, std::size_t> by_id_;
};

Vector global_average_pool(const ActivationTensor& a);

Vector logits(const ClassifierHead& head, const ActivationTensor& a);
Vector logits_from_pooled(const ClassifierHead& head, std::span<const double> pooled);

std::size_t argmax(std::span<const double> values);
std::size_t predicted_class(const ClassifierHead& head, const ActivationTensor& a);

// d y^c / d A[k,i,j]; for the GAP + linear head this is weights[c,k]/(u*v).
ActivationTensor grad_logit_wrt_activations(const ClassifierHead& head, const ActivationTensor& a,
                                            const std::string& label);

// Backend contract for classifiers whose activations come from elsewhere.
// Downstream modules only talk to this interface.
class ModelBackend {
 public:
  virtual ~ModelBackend() = default;

  virtual const std::vector<std::string>& class_labels() const = 0;
  virtual std::size_t num_maps() const = 0;
  virtual Vector logits(const ActivationTensor& a) const = 0;
  virtual ActivationTensor gradient(const ActivationTensor& a, std::size_t class_index) const = 0;
  // Gradient of a logit with respect to the GAP-pooled feature vector.
  virtual Vector pooled_gradient(const ActivationTensor& a, std::size_t class_index) const = 0;

  std::size_t class_index(const std::string& label) const;
};

class GapLinearBackend final : public ModelBackend {
 public:
  explicit GapLinearBackend(ClassifierHead head) : head_(std::move(head)) {}

  const ClassifierHead& head() const noexcept { return head_; }

  const std::vector<std::string>& class_labels() const override { return head_.labels(); }
  std::size_t num_maps() const override { return head_.num_maps(); }
  Vector logits(const ActivationTensor& a) const override;
  ActivationTensor gradient(const ActivationTensor& a, std::size_t class_index) const override;
  Vector pooled_gradient(const ActivationTensor& a, std::size_t class_index) const override;

 private:
  ClassifierHead head_;
};

}  // namespace faultline
