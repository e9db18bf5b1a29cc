#include "malimg/analysis.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "malimg/csv.hpp"
#include "malimg/error.hpp"

namespace malimg {

namespace {

// One image per forward pass: GEMM blocking depends on the batch width, so a
// sample embedded inside a larger batch can differ in the last bits.
constexpr std::size_t kExportBatch = 1;

std::string format_double(double v) {
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, res.ptr};
}

double parse_double(const std::string& s, const std::string& where) {
    double v = 0.0;
    const auto* end = s.data() + s.size();
    const auto res = std::from_chars(s.data(), end, v);
    if (res.ec != std::errc{} || res.ptr != end) throw Error(ErrorKind::BadSpec, where + ": not a number: '" + s + "'");
    return v;
}

int parse_int(const std::string& s, const std::string& where) {
    int v = 0;
    const auto* end = s.data() + s.size();
    const auto res = std::from_chars(s.data(), end, v);
    if (res.ec != std::errc{} || res.ptr != end) throw Error(ErrorKind::BadSpec, where + ": not an integer: '" + s + "'");
    return v;
}

double distance(std::span<const double> a, std::span<const double> b) {
    double sum = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        sum += d * d;
    }
    return std::sqrt(sum);
}

double quantile(std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorKind::MissingFile, "cannot read '" + path.string() + "'");
    return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot write '" + path.string() + "'");
    return out;
}

std::string read_all(const std::filesystem::path& path) {
    std::ifstream in(path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const char* family_color(int family) {
    static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    if (family < 0) return "#000000";
    return palette[static_cast<std::size_t>(family) % std::size(palette)];
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
        switch (ch) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += ch;
        }
    }
    return out;
}

struct Frame {
    double x0, x1, y0, y1;
    double left = 70, right = 160, top = 40, bottom = 50, width = 720, height = 480;

    double px(double x) const { return left + (x - x0) / (x1 - x0) * (width - left - right); }
    double py(double y) const { return height - bottom - (y - y0) / (y1 - y0) * (height - top - bottom); }
};

void widen(double& lo, double& hi) {
    if (!(hi > lo)) {
        lo -= 0.5;
        hi += 0.5;
    }
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
}

std::string svg_open(const Frame& f, const std::string& title) {
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<rect x=\"" << f.left << "\" y=\"" << f.top << "\" width=\"" << f.width - f.left - f.right
      << "\" height=\"" << f.height - f.top - f.bottom << "\" fill=\"none\" stroke=\"#444\"/>\n";
    if (!title.empty()) {
        s << "<text x=\"" << f.width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
          << "</text>\n";
    }
    return s.str();
}

}  // namespace

void EmbeddingTable::append(const std::string& source_id, int family_id, std::span<const double> embedding) {
    if (rows() == 0 && dim == 0) dim = embedding.size();
    if (embedding.size() != dim) {
        throw Error(ErrorKind::ShapeMismatch, "embedding of width " + std::to_string(embedding.size()) +
                                                  " does not match table width " + std::to_string(dim));
    }
    source_ids.push_back(source_id);
    family_ids.push_back(family_id);
    values.insert(values.end(), embedding.begin(), embedding.end());
}

EmbeddingTable export_embeddings(const ModelConfig& config, const ModelParams& params, const LabeledCorpus& corpus) {
    if (corpus.empty()) throw Error(ErrorKind::EmptyCorpus, "no samples to embed");
    EmbeddingTable table;
    table.dim = config.embedding_dim();
    Rng unused(0);
    for (std::size_t start = 0; start < corpus.size(); start += kExportBatch) {
        const std::size_t end = std::min(corpus.size(), start + kExportBatch);
        std::vector<const GrayImage*> images;
        for (std::size_t i = start; i < end; ++i) images.push_back(&corpus.samples[i].image);
        const auto emb = encoder_forward(config, params, ImageBatch::from_images(images), Mode::eval, unused);
        const auto probs = head_forward(config, params, emb, Mode::eval, unused);
        for (std::size_t i = 0; i < end - start; ++i) {
            const auto& sample = corpus.samples[start + i];
            table.source_ids.push_back(sample.source_id);
            table.family_ids.push_back(sample.family_id);
            const Real* row = emb.row(i);
            table.values.insert(table.values.end(), row, row + emb.dim);
            const Real* p = probs.data() + i * config.families;
            table.max_prob.push_back(static_cast<double>(*std::max_element(p, p + config.families)));
        }
    }
    return table;
}

Projection2D project_pca(const EmbeddingTable& table) {
    const std::size_t n = table.rows();
    if (n < 3) throw Error(ErrorKind::TooFewRows, "projection needs at least 3 rows, got " + std::to_string(n));
    using Mat = Eigen::MatrixXd;
    const auto rows = static_cast<Eigen::Index>(n);
    const auto cols = static_cast<Eigen::Index>(table.dim);
    Mat x = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        table.values.data(), rows, cols);
    const Eigen::RowVectorXd mean = x.colwise().mean();
    x.rowwise() -= mean;

    // Loadings (dim x 2) from whichever Gram matrix is smaller.
    Mat loadings(cols, 2);
    if (table.dim <= n) {
        const Eigen::SelfAdjointEigenSolver<Mat> eig(x.transpose() * x);
        for (int k = 0; k < 2; ++k) loadings.col(k) = eig.eigenvectors().col(cols - 1 - k);
    } else {
        const Eigen::SelfAdjointEigenSolver<Mat> eig(x * x.transpose());
        for (int k = 0; k < 2; ++k) {
            const double lambda = eig.eigenvalues()(rows - 1 - k);
            Eigen::VectorXd v = x.transpose() * eig.eigenvectors().col(rows - 1 - k);
            const double norm = v.norm();
            if (lambda > 0.0 && norm > 0.0) {
                loadings.col(k) = v / norm;
            } else {
                loadings.col(k).setZero();
                loadings(k < cols ? k : 0, k) = 1.0;
            }
        }
    }
    for (int k = 0; k < 2; ++k) {
        Eigen::Index arg = 0;
        loadings.col(k).cwiseAbs().maxCoeff(&arg);
        if (loadings(arg, k) < 0.0) loadings.col(k) = -loadings.col(k);
    }
    const Mat scores = x * loadings;

    Projection2D out;
    out.method = "pca";
    out.source_ids = table.source_ids;
    out.family_ids = table.family_ids;
    for (std::size_t i = 0; i < n; ++i) {
        out.x.push_back(scores(static_cast<Eigen::Index>(i), 0));
        out.y.push_back(scores(static_cast<Eigen::Index>(i), 1));
    }
    return out;
}

Projection2D project_external(const EmbeddingTable& table, const std::string& command) {
    if (table.rows() < 3) {
        throw Error(ErrorKind::TooFewRows, "projection needs at least 3 rows, got " + std::to_string(table.rows()));
    }
    if (command.empty()) throw Error(ErrorKind::ExternalToolFailure, "no projector command configured");
    static int counter = 0;
    const auto dir = std::filesystem::temp_directory_path() /
                     ("malimg-project-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(dir);
    const auto in = dir / "embeddings.csv";
    const auto out = dir / "projection.csv";
    const auto err = dir / "stderr.txt";
    write_embedding_csv(table, in);

    const std::string shell = "(" + command + ") < '" + in.string() + "' > '" + out.string() + "' 2> '" +
                              err.string() + "'";
    const int status = std::system(shell.c_str());
    const std::string diagnostics = read_all(err);
    const auto cleanup = [&] {
        std::error_code ec;
        std::filesystem::remove_all(dir, ec);
    };
    if (status == -1 || !WIFEXITED(status) || WEXITSTATUS(status) != 0) {
        cleanup();
        const int code = (status != -1 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
        throw Error(ErrorKind::ExternalToolFailure,
                    "'" + command + "' exited with status " + std::to_string(code) + ": " + diagnostics);
    }
    Projection2D projection;
    try {
        projection = read_projection_csv(out);
    } catch (const Error& e) {
        cleanup();
        throw Error(ErrorKind::ExternalToolFailure, "'" + command + "' printed an unreadable projection: " + e.what());
    }
    cleanup();
    if (projection.rows() != table.rows()) {
        throw Error(ErrorKind::ExternalToolFailure, "'" + command + "' returned " +
                                                        std::to_string(projection.rows()) + " rows for " +
                                                        std::to_string(table.rows()) + " inputs");
    }
    projection.method = "external";
    return projection;
}

Projection2D project_2d(const EmbeddingTable& table, ProjectionMethod method, const std::string& command) {
    return method == ProjectionMethod::pca ? project_pca(table) : project_external(table, command);
}

double cluster_quality(const EmbeddingTable& table) {
    std::map<int, std::size_t> sizes;
    for (int f : table.family_ids) ++sizes[f];
    if (sizes.size() < 2) throw Error(ErrorKind::DegenerateLabels, "silhouette needs at least two families");
    for (const auto& [family, count] : sizes) {
        if (count < 2) {
            throw Error(ErrorKind::DegenerateLabels, "family " + std::to_string(family) + " has a single row");
        }
    }
    const std::size_t n = table.rows();
    std::vector<double> dist(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) dist[i * n + j] = dist[j * n + i] = distance(table.row(i), table.row(j));
    }
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        std::map<int, double> sums;
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) sums[table.family_ids[j]] += dist[i * n + j];
        }
        const int own = table.family_ids[i];
        const double a = sums[own] / static_cast<double>(sizes[own] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (const auto& [family, sum] : sums) {
            if (family != own) b = std::min(b, sum / static_cast<double>(sizes[family]));
        }
        const double denom = std::max(a, b);
        total += denom > 0.0 ? (b - a) / denom : 0.0;
    }
    return total / static_cast<double>(n);
}

NoveltyReference build_reference(const EmbeddingTable& table, double q) {
    if (table.rows() == 0) throw Error(ErrorKind::EmptyReference, "reference table has no rows");
    NoveltyReference ref;
    ref.dim = table.dim;
    std::map<int, std::vector<std::size_t>> members;
    for (std::size_t i = 0; i < table.rows(); ++i) members[table.family_ids[i]].push_back(i);
    for (const auto& [family, rows] : members) {
        std::vector<double> centroid(table.dim, 0.0);
        for (auto r : rows) {
            const auto v = table.row(r);
            for (std::size_t k = 0; k < table.dim; ++k) centroid[k] += v[k];
        }
        for (auto& c : centroid) c /= static_cast<double>(rows.size());
        std::vector<double> d;
        for (auto r : rows) d.push_back(distance(table.row(r), centroid));
        ref.families.push_back(family);
        ref.centroids.insert(ref.centroids.end(), centroid.begin(), centroid.end());
        ref.thresholds.push_back(quantile(std::move(d), q));
    }
    return ref;
}

NoveltyResult novelty_score(const NoveltyReference& reference, std::span<const double> query) {
    if (reference.families.empty()) throw Error(ErrorKind::EmptyReference, "reference has no families");
    if (query.size() != reference.dim) {
        throw Error(ErrorKind::ShapeMismatch, "query width " + std::to_string(query.size()) + " != reference width " +
                                                  std::to_string(reference.dim));
    }
    NoveltyResult out;
    out.distance = std::numeric_limits<double>::infinity();
    out.novel = true;
    for (std::size_t f = 0; f < reference.families.size(); ++f) {
        const double d = distance(query, {reference.centroids.data() + f * reference.dim, reference.dim});
        if (d < out.distance) {
            out.distance = d;
            out.nearest_family = reference.families[f];
        }
        if (d <= reference.thresholds[f]) out.novel = false;
    }
    return out;
}

NoveltyResult novelty_score(const EmbeddingTable& reference, const EmbeddingBlock& query) {
    if (reference.rows() == 0) throw Error(ErrorKind::EmptyReference, "reference table has no rows");
    const std::vector<double> q(query.values.begin(), query.values.end());
    return novelty_score(build_reference(reference), q);
}

void write_embedding_csv(const EmbeddingTable& table, std::ostream& out) {
    out << "source_id,family_id";
    for (std::size_t k = 0; k < table.dim; ++k) {
        char name[16];
        std::snprintf(name, sizeof name, ",e%04zu", k);
        out << name;
    }
    out << '\n';
    for (std::size_t i = 0; i < table.rows(); ++i) {
        out << csv_field(table.source_ids[i]) << ',' << table.family_ids[i];
        for (double v : table.row(i)) out << ',' << format_double(v);
        out << '\n';
    }
}

void write_embedding_csv(const EmbeddingTable& table, const std::filesystem::path& path) {
    auto out = open_out(path);
    write_embedding_csv(table, out);
    if (!out) throw Error(ErrorKind::Io, "failed writing '" + path.string() + "'");
}

EmbeddingTable read_embedding_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorKind::BadSpec, "embedding CSV is empty");
    const auto header = split_csv_line(line);
    if (header.size() < 3 || header[0] != "source_id" || header[1] != "family_id") {
        throw Error(ErrorKind::BadSpec, "embedding CSV header must start with 'source_id,family_id,e0000'");
    }
    EmbeddingTable table;
    table.dim = header.size() - 2;
    std::size_t line_no = 1;
    std::vector<double> row(table.dim);
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        const std::string where = "embedding CSV line " + std::to_string(line_no);
        if (fields.size() != header.size()) throw Error(ErrorKind::BadSpec, where + ": wrong field count");
        for (std::size_t k = 0; k < table.dim; ++k) row[k] = parse_double(fields[k + 2], where);
        table.append(fields[0], parse_int(fields[1], where), row);
    }
    return table;
}

EmbeddingTable read_embedding_csv(const std::filesystem::path& path) {
    auto in = open_in(path);
    return read_embedding_csv(in);
}

void write_projection_csv(const Projection2D& projection, std::ostream& out) {
    out << "source_id,family_id,x,y\n";
    for (std::size_t i = 0; i < projection.rows(); ++i) {
        out << csv_field(projection.source_ids[i]) << ',' << projection.family_ids[i] << ','
            << format_double(projection.x[i]) << ',' << format_double(projection.y[i]) << '\n';
    }
}

void write_projection_csv(const Projection2D& projection, const std::filesystem::path& path) {
    auto out = open_out(path);
    write_projection_csv(projection, out);
    if (!out) throw Error(ErrorKind::Io, "failed writing '" + path.string() + "'");
}

Projection2D read_projection_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorKind::BadSpec, "projection CSV is empty");
    const auto header = split_csv_line(line);
    if (header != std::vector<std::string>{"source_id", "family_id", "x", "y"}) {
        throw Error(ErrorKind::BadSpec, "projection CSV header must be 'source_id,family_id,x,y'");
    }
    Projection2D p;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        const std::string where = "projection CSV line " + std::to_string(line_no);
        if (f.size() != 4) throw Error(ErrorKind::BadSpec, where + ": expected 4 fields");
        p.source_ids.push_back(f[0]);
        p.family_ids.push_back(parse_int(f[1], where));
        p.x.push_back(parse_double(f[2], where));
        p.y.push_back(parse_double(f[3], where));
    }
    return p;
}

Projection2D read_projection_csv(const std::filesystem::path& path) {
    auto in = open_in(path);
    return read_projection_csv(in);
}

std::string scatter_svg(const Projection2D& projection, const std::vector<std::string>& family_names,
                        const std::string& title) {
    Frame f{0, 1, 0, 1};
    if (projection.rows() > 0) {
        f.x0 = *std::min_element(projection.x.begin(), projection.x.end());
        f.x1 = *std::max_element(projection.x.begin(), projection.x.end());
        f.y0 = *std::min_element(projection.y.begin(), projection.y.end());
        f.y1 = *std::max_element(projection.y.begin(), projection.y.end());
    }
    widen(f.x0, f.x1);
    widen(f.y0, f.y1);
    std::ostringstream s;
    s << std::setprecision(6) << svg_open(f, title);
    for (std::size_t i = 0; i < projection.rows(); ++i) {
        s << "<circle cx=\"" << f.px(projection.x[i]) << "\" cy=\"" << f.py(projection.y[i]) << "\" r=\"3\" fill=\""
          << family_color(projection.family_ids[i]) << "\" fill-opacity=\"0.75\"/>\n";
    }
    std::vector<int> families(projection.family_ids.begin(), projection.family_ids.end());
    std::sort(families.begin(), families.end());
    families.erase(std::unique(families.begin(), families.end()), families.end());
    double y = f.top + 10;
    for (int fam : families) {
        const std::string name = fam >= 0 && static_cast<std::size_t>(fam) < family_names.size()
                                     ? family_names[static_cast<std::size_t>(fam)]
                                     : (fam < 0 ? std::string("unlabeled") : "family " + std::to_string(fam));
        s << "<circle cx=\"" << f.width - f.right + 15 << "\" cy=\"" << y << "\" r=\"4\" fill=\"" << family_color(fam)
          << "\"/><text x=\"" << f.width - f.right + 25 << "\" y=\"" << y + 4 << "\">" << xml_escape(name)
          << "</text>\n";
        y += 18;
    }
    s << "<text x=\"" << f.width / 2 << "\" y=\"" << f.height - 15 << "\" text-anchor=\"middle\">"
      << xml_escape(projection.method) << " 1</text>\n"
      << "<text x=\"20\" y=\"" << f.height / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 20 "
      << f.height / 2 << ")\">" << xml_escape(projection.method) << " 2</text>\n</svg>\n";
    return s.str();
}

std::string loss_overlay_svg(const std::vector<LossSeries>& series, const std::string& title) {
    Frame f{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
            std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
    const auto log_of = [](double v) { return std::log10(std::max(v, 1e-12)); };
    for (const auto& sr : series) {
        for (std::size_t i = 0; i < sr.values.size(); ++i) {
            f.x0 = std::min(f.x0, sr.steps[i]);
            f.x1 = std::max(f.x1, sr.steps[i]);
            f.y0 = std::min(f.y0, log_of(sr.values[i]));
            f.y1 = std::max(f.y1, log_of(sr.values[i]));
        }
    }
    if (!std::isfinite(f.x0)) f.x0 = f.x1 = f.y0 = f.y1 = 0.0;
    if (!(f.x1 > f.x0)) f.x1 = f.x0 + 1.0;
    f.y0 = std::floor(f.y0);
    f.y1 = std::ceil(f.y1);
    if (!(f.y1 > f.y0)) f.y1 = f.y0 + 1.0;

    std::ostringstream s;
    s << std::setprecision(6) << svg_open(f, title);
    for (int decade = static_cast<int>(f.y0); decade <= static_cast<int>(f.y1); ++decade) {
        const double y = f.py(decade);
        s << "<line x1=\"" << f.left << "\" x2=\"" << f.width - f.right << "\" y1=\"" << y << "\" y2=\"" << y
          << "\" stroke=\"#ddd\"/><text x=\"" << f.left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">1e"
          << decade << "</text>\n";
    }
    s << "<text x=\"" << f.left << "\" y=\"" << f.height - 30 << "\">" << f.x0 << "</text>"
      << "<text x=\"" << f.width - f.right << "\" y=\"" << f.height - 30 << "\" text-anchor=\"end\">" << f.x1
      << "</text>\n<text x=\"" << f.width / 2 << "\" y=\"" << f.height - 12
      << "\" text-anchor=\"middle\">step</text>\n";
    double ly = f.top + 10;
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& sr = series[k];
        const char* color = family_color(static_cast<int>(k));
        s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < sr.values.size(); ++i) {
            s << f.px(sr.steps[i]) << ',' << f.py(log_of(sr.values[i])) << ' ';
        }
        s << "\"/>\n<line x1=\"" << f.width - f.right + 8 << "\" x2=\"" << f.width - f.right + 28 << "\" y1=\"" << ly
          << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/><text x=\""
          << f.width - f.right + 32 << "\" y=\"" << ly + 4 << "\">" << xml_escape(sr.label) << "</text>\n";
        ly += 18;
    }
    s << "</svg>\n";
    return s.str();
}

}  // namespace malimg
