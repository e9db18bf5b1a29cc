#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "malimg/dataset.hpp"
#include "malimg/model.hpp"

namespace malimg {

// One row per sample: flattened HWC embedding plus the head's top probability.
struct EmbeddingTable {
    std::vector<std::string> source_ids;
    std::vector<int> family_ids;
    std::size_t dim = 0;
    std::vector<double> values;    // rows x dim
    std::vector<double> max_prob;  // empty when the table was read from CSV

    std::size_t rows() const { return source_ids.size(); }
    std::span<const double> row(std::size_t i) const { return {values.data() + i * dim, dim}; }
    void append(const std::string& source_id, int family_id, std::span<const double> embedding);
};

/// Eval-mode encoder embeddings of every sample. Throws EmptyCorpus.
EmbeddingTable export_embeddings(const ModelConfig& config, const ModelParams& params, const LabeledCorpus& corpus);

enum class ProjectionMethod { pca, external };

struct Projection2D {
    std::vector<std::string> source_ids;
    std::vector<int> family_ids;
    std::vector<double> x;
    std::vector<double> y;
    std::string method;

    std::size_t rows() const { return source_ids.size(); }
};

/// Top two principal components of the centered table. Each component's
/// sign is chosen so that its largest-magnitude loading is positive.
/// Throws TooFewRows below three rows.
Projection2D project_pca(const EmbeddingTable& table);

/// Pipes the embedding CSV through `command` (stdin -> stdout) and parses the
/// projection CSV it prints. Throws ExternalToolFailure with its stderr.
Projection2D project_external(const EmbeddingTable& table, const std::string& command);

Projection2D project_2d(const EmbeddingTable& table, ProjectionMethod method, const std::string& command = {});

/// Mean silhouette over all rows, Euclidean distance, labels = family_id.
/// A row whose intra and nearest-other distances are both zero scores 0.
/// Throws DegenerateLabels unless there are >= 2 families with >= 2 rows each.
double cluster_quality(const EmbeddingTable& table);

struct NoveltyReference {
    std::vector<int> families;
    std::size_t dim = 0;
    std::vector<double> centroids;   // families.size() x dim
    std::vector<double> thresholds;  // quantile of member-to-centroid distance per family
};

struct NoveltyResult {
    double distance = 0.0;  // to the nearest centroid
    int nearest_family = -1;
    bool novel = false;     // beyond the threshold of every family
};

/// Quantile uses linear interpolation between order statistics.
NoveltyReference build_reference(const EmbeddingTable& table, double quantile = 0.95);

/// Throws EmptyReference for a table without rows, ShapeMismatch on dim.
NoveltyResult novelty_score(const NoveltyReference& reference, std::span<const double> query);
NoveltyResult novelty_score(const EmbeddingTable& reference, const EmbeddingBlock& query);

// CSV formats:
//   embeddings:  source_id,family_id,e0000,e0001,...
//   projection:  source_id,family_id,x,y
void write_embedding_csv(const EmbeddingTable& table, std::ostream& out);
void write_embedding_csv(const EmbeddingTable& table, const std::filesystem::path& path);
EmbeddingTable read_embedding_csv(std::istream& in);
EmbeddingTable read_embedding_csv(const std::filesystem::path& path);

void write_projection_csv(const Projection2D& projection, std::ostream& out);
void write_projection_csv(const Projection2D& projection, const std::filesystem::path& path);
Projection2D read_projection_csv(std::istream& in);
Projection2D read_projection_csv(const std::filesystem::path& path);

/// Scatter plot colored by family.
std::string scatter_svg(const Projection2D& projection, const std::vector<std::string>& family_names = {},
                        const std::string& title = {});

struct LossSeries {
    std::string label;
    std::vector<double> steps;
    std::vector<double> values;
};

/// Overlay of loss curves on a log-scaled y axis.
std::string loss_overlay_svg(const std::vector<LossSeries>& series, const std::string& title = {});

}  // namespace malimg
