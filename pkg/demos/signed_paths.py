"""
How negative signals travel
===========================

A toy graph with four users and five items. We propagate one-hot initial
embeddings, so every entry of a final embedding is the weight with which one
node's initial vector reaches another node.
"""

import numpy as np

from signrec import SignedBipartiteGraph, full_forward

# (user, item, sign); u1 is user 0, i1 is item 0 and so on
edges = [
    (0, 0, +1), (0, 2, +1),
    (1, 1, +1), (1, 2, -1), (1, 4, -1),
    (2, 0, +1), (2, 3, -1),
    (3, 3, +1), (3, 4, +1),
]
u, i, s = zip(*edges)
g = SignedBipartiteGraph.from_edges(4, 5, u, i, s)
print(f"{g.num_users} users, {g.num_items} items, {g.num_pos} liked, {g.num_neg} disliked")

eye = np.eye(g.num_users + g.num_items)


def weights(layers):
    return full_forward(g, eye[: g.num_users], eye[g.num_users :], layers)


def name(col):
    return f"u{col + 1}" if col < g.num_users else f"i{col - g.num_users + 1}"


# %%
# What reaches u1's negative embedding?
#
# Layer 1 only reads u1's own disliked items (there are none). From layer 2 on,
# negative signals that entered a neighbour move along *liked* edges.
for layers in (1, 2, 3):
    row = weights(layers).final_neg_user[0]
    nonzero = {name(c): round(float(v), 4) for c, v in enumerate(row) if abs(v) > 1e-12}
    print(f"L={layers}: {nonzero or 'nothing'}")

# %%
# At L=2 u1 picks up u2, who dislikes i3, which u1 likes.
# The longer path u1 <- i1 <- u3 <- i4 needs a third layer.
w3 = weights(3).final_neg_user[0, g.num_users + 3]
print("weight of i4 in u1's negative embedding at L=3:", round(float(w3), 4))
print("  = (1/3) * 1/sqrt(2*2) * 1/sqrt(1*2) * 1/sqrt(1*1) =", round((1 / 3) / 2 / np.sqrt(2), 4))

# %%
# Disliked edges never carry positive signal: u2 likes only i2, so its
# positive embedding sees nothing of i3 or i5 at one layer.
row = weights(1).final_pos_user[1]
print("u2 positive, L=1:", {name(c): round(float(v), 3) for c, v in enumerate(row) if v})
